//! INI run configuration.
//!
//! The file is read into an ordered table of raw strings first; sweeps
//! override entries of that table and re-run the typed parse for each cell.

use std::collections::BTreeMap;
use std::path::Path;

use ini::Ini;
use tilted_core::analytic_models::{GaussianMixture, Reward};
use tilted_core::efr::GuidanceConfig;
use tilted_core::lookahead::SolverKind;
use tilted_core::particles::{Potential, Resampling, SmcConfig};
use tilted_core::samplers::{Method, SafeDParams, SamplerSpec, SrParams, StepOptions, StepRule};
use tilted_core::schedule::{make_grid, GridKind, NoiseSchedule, ScheduleKind};

use crate::error::{CliError, CliResult};

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    (
        "model",
        &["context_id", "dim", "weights", "means", "variances"],
    ),
    ("reward", &["kind", "a", "centers", "A", "b", "min", "max"]),
    ("schedule", &["kind", "sigma_min", "sigma_max"]),
    (
        "sampler",
        &[
            "method",
            "tau",
            "grid",
            "stochastic",
            "step_rule",
            "safe_d_scale",
            "safe_d_beta",
            "safe_d_refs",
            "sr_scale",
            "sr_radius",
            "sr_refs",
        ],
    ),
    ("guidance", &["lambda", "s", "n", "delta", "solver"]),
    (
        "particles",
        &["N", "method", "resample_every", "resampling", "potential"],
    ),
    (
        "experiment",
        &[
            "seed",
            "run_id",
            "repetitions",
            "tv",
            "tv_bins",
            "tv_coord",
            "efr_trajectories",
            "efr_n_true",
            "share_pool",
            "record_wall",
        ],
    ),
];

/// Short sweep parameter names and the entries they set.
pub const SWEEP_ALIASES: &[(&str, &str, &str)] = &[
    ("n", "guidance", "n"),
    ("delta", "guidance", "delta"),
    ("lambda", "guidance", "lambda"),
    ("s", "guidance", "s"),
    ("solver", "guidance", "solver"),
    ("N", "particles", "N"),
    ("particles", "particles", "method"),
    ("resample_every", "particles", "resample_every"),
    ("tau", "sampler", "tau"),
    ("method", "sampler", "method"),
    ("seed", "experiment", "seed"),
];

/// Raw `section -> key -> value` table plus the declared sweep axes.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), String>,
    pub sweep: Vec<(String, Vec<String>)>,
}

impl RawConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let ini = Ini::load_from_str(text)
            .map_err(|e| CliError::Config(format!("config syntax: {e}")))?;
        let mut raw = RawConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(CliError::Config("entries before the first section".into()));
                }
                continue;
            };
            for (key, value) in props.iter() {
                // Trailing `;` or `#` comments.
                let value = value.split([';', '#']).next().unwrap_or("").trim();
                if section == "sweep" {
                    if raw.sweep.iter().any(|(k, _)| k == key) {
                        return Err(CliError::Config(format!("duplicate sweep axis {key}")));
                    }
                    let values: Vec<String> = split_list(value).map(str::to_string).collect();
                    if values.is_empty() {
                        return Err(CliError::Config(format!("sweep axis {key} has no values")));
                    }
                    raw.sweep.push((key.to_string(), values));
                    continue;
                }
                let known = KNOWN_KEYS
                    .iter()
                    .find(|(s, _)| *s == section)
                    .ok_or_else(|| CliError::Config(format!("unknown section [{section}]")))?;
                if !known.1.contains(&key) {
                    return Err(CliError::Config(format!(
                        "unknown key {key} in [{section}]"
                    )));
                }
                let slot = (section.to_string(), key.to_string());
                if raw.entries.insert(slot, value.trim().to_string()).is_some() {
                    return Err(CliError::Config(format!(
                        "duplicate key {key} in [{section}]"
                    )));
                }
            }
        }
        Ok(raw)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.entries
            .insert((section.to_string(), key.to_string()), value.to_string());
    }

    /// Resolves a sweep axis name to its `(section, key)` entry.
    pub fn resolve_axis(name: &str) -> Option<(&'static str, &'static str)> {
        if let Some(&(_, s, k)) = SWEEP_ALIASES.iter().find(|(a, _, _)| *a == name) {
            return Some((s, k));
        }
        let (section, key) = name.split_once('.')?;
        KNOWN_KEYS
            .iter()
            .find(|(s, _)| *s == section)
            .and_then(|(s, keys)| keys.iter().find(|k| **k == key).map(|k| (*s, *k)))
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|v| !v.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticleMode {
    Independent,
    Smc,
    Bon,
    SmcBon,
}

impl ParticleMode {
    pub fn name(&self) -> &'static str {
        match self {
            ParticleMode::Independent => "independent",
            ParticleMode::Smc => "smc",
            ParticleMode::Bon => "bon",
            ParticleMode::SmcBon => "smc_bon",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub run_id: String,
    pub repetitions: usize,
    pub tv: bool,
    pub tv_bins: usize,
    pub tv_coord: usize,
    pub efr_trajectories: usize,
    pub efr_n_true: usize,
    pub share_pool: bool,
    pub record_wall: bool,
}

/// Fully typed and validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub context_id: String,
    pub model: GaussianMixture,
    pub reward: Reward,
    pub schedule: NoiseSchedule,
    pub method: Method,
    pub tau: usize,
    pub grid: GridKind,
    pub options: StepOptions,
    pub safe_d: SafeDParams,
    pub sr: SrParams,
    pub guidance: GuidanceConfig,
    pub delta: usize,
    pub solver: SolverKind,
    pub chains: usize,
    pub particles: ParticleMode,
    pub smc: SmcConfig,
    pub experiment: Experiment,
}

struct Reader<'a> {
    raw: &'a RawConfig,
}

impl Reader<'_> {
    fn str(&self, s: &str, k: &str) -> Option<&str> {
        self.raw.get(s, k)
    }

    fn required(&self, s: &str, k: &str) -> CliResult<&str> {
        self.str(s, k)
            .ok_or_else(|| CliError::Config(format!("missing {k} in [{s}]")))
    }

    fn f64(&self, s: &str, k: &str, default: f64) -> CliResult<f64> {
        match self.str(s, k) {
            None => Ok(default),
            Some(v) => parse_f64(v)
                .map_err(|_| CliError::Config(format!("{s}.{k}: expected a number, got {v:?}"))),
        }
    }

    fn usize(&self, s: &str, k: &str, default: usize) -> CliResult<usize> {
        match self.str(s, k) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                CliError::Config(format!(
                    "{s}.{k}: expected a nonnegative integer, got {v:?}"
                ))
            }),
        }
    }

    fn u64(&self, s: &str, k: &str, default: u64) -> CliResult<u64> {
        match self.str(s, k) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                CliError::Config(format!(
                    "{s}.{k}: expected a nonnegative integer, got {v:?}"
                ))
            }),
        }
    }

    fn bool(&self, s: &str, k: &str, default: bool) -> CliResult<bool> {
        match self.str(s, k) {
            None => Ok(default),
            Some("true") | Some("yes") | Some("1") => Ok(true),
            Some("false") | Some("no") | Some("0") => Ok(false),
            Some(v) => Err(CliError::Config(format!(
                "{s}.{k}: expected true or false, got {v:?}"
            ))),
        }
    }

    fn list(&self, s: &str, k: &str) -> CliResult<Vec<f64>> {
        let v = self.required(s, k)?;
        split_list(v)
            .map(|x| {
                parse_f64(x).map_err(|_| CliError::Config(format!("{s}.{k}: bad number {x:?}")))
            })
            .collect()
    }
}

fn parse_f64(v: &str) -> Result<f64, std::num::ParseFloatError> {
    let x: f64 = v.trim().parse()?;
    if x.is_finite() {
        Ok(x)
    } else {
        "not finite".parse()
    }
}

fn chunk(flat: Vec<f64>, dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> CliResult<Self> {
        let r = Reader { raw };

        let context_id = r
            .str("model", "context_id")
            .unwrap_or("default")
            .to_string();
        let weights = r.list("model", "weights")?;
        let k = weights.len();
        let means = r.list("model", "means")?;
        if k == 0 || means.len() % k != 0 {
            return Err(CliError::Config(format!(
                "model.means has {} values for {k} components",
                means.len()
            )));
        }
        let dim = r.usize("model", "dim", means.len() / k)?;
        if dim == 0 || means.len() != k * dim {
            return Err(CliError::Config(format!(
                "model.means needs {k} x {dim} values, got {}",
                means.len()
            )));
        }
        let variances = r.list("model", "variances")?;
        let variances = if variances.len() == 1 {
            vec![variances[0]; k * dim]
        } else if variances.len() == k {
            variances
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, dim))
                .collect()
        } else if variances.len() == k * dim {
            variances
        } else {
            return Err(CliError::Config(format!(
                "model.variances needs 1, {k} or {} values, got {}",
                k * dim,
                variances.len()
            )));
        };
        let model = GaussianMixture::new(weights, chunk(means, dim), chunk(variances, dim))
            .map_err(|e| CliError::Config(format!("[model]: {e}")))?;

        let reward = match r.required("reward", "kind")? {
            "linear" => Reward::linear(r.list("reward", "a")?),
            "negdist" => {
                let c = r.list("reward", "centers")?;
                if c.is_empty() || c.len() % dim != 0 {
                    return Err(CliError::Config(format!(
                        "reward.centers must hold a multiple of {dim} values"
                    )));
                }
                Reward::neg_dist(chunk(c, dim))
            }
            "quadratic" => Reward::quadratic(r.list("reward", "A")?, r.list("reward", "b")?),
            other => return Err(CliError::Config(format!("unknown reward kind {other:?}"))),
        };
        let reward = match (r.str("reward", "min"), r.str("reward", "max")) {
            (None, None) => reward,
            _ => reward.with_bounds(
                r.f64("reward", "min", f64::NEG_INFINITY)?,
                r.f64("reward", "max", f64::INFINITY)?,
            ),
        };
        reward
            .validate(dim)
            .map_err(|e| CliError::Config(format!("[reward]: {e}")))?;

        let kind = match r.str("schedule", "kind").unwrap_or("geometric") {
            "geometric" => ScheduleKind::Geometric,
            "linear" => ScheduleKind::Linear,
            other => return Err(CliError::Config(format!("unknown schedule kind {other:?}"))),
        };
        let defaults = NoiseSchedule::default();
        let schedule = NoiseSchedule::new(
            r.f64("schedule", "sigma_min", defaults.sigma_min())?,
            r.f64("schedule", "sigma_max", defaults.sigma_max())?,
            kind,
        )
        .map_err(|e| CliError::Config(format!("[schedule]: {e}")))?;

        let method_name = r.str("sampler", "method").unwrap_or("lidar");
        let method = Method::parse(method_name)
            .ok_or_else(|| CliError::Usage(format!("unknown method {method_name:?}")))?;
        let tau = r.usize("sampler", "tau", 64)?;
        let grid = match r.str("sampler", "grid").unwrap_or("uniform") {
            "uniform" => GridKind::Uniform,
            "sigma_uniform" => GridKind::SigmaUniform,
            other => return Err(CliError::Config(format!("unknown grid {other:?}"))),
        };
        let rule = match r.str("sampler", "step_rule").unwrap_or("tangent") {
            "tangent" => StepRule::Tangent,
            "variance_exact" => StepRule::VarianceExact,
            other => return Err(CliError::Config(format!("unknown step_rule {other:?}"))),
        };
        let options = StepOptions {
            stochastic: r.bool("sampler", "stochastic", true)?,
            rule,
        };
        let sd = SafeDParams::default();
        let safe_d = SafeDParams {
            scale: r.f64("sampler", "safe_d_scale", sd.scale)?,
            beta: r.f64("sampler", "safe_d_beta", sd.beta)?,
            refs: r.usize("sampler", "safe_d_refs", sd.refs)?,
        };
        let srd = SrParams::default();
        let sr = SrParams {
            scale: r.f64("sampler", "sr_scale", srd.scale)?,
            radius: r.f64("sampler", "sr_radius", srd.radius)?,
            refs: r.usize("sampler", "sr_refs", srd.refs)?,
        };

        let gd = GuidanceConfig::default();
        let lambda = r.f64("guidance", "lambda", gd.lambda)?;
        let s = r.f64("guidance", "s", gd.s)?;
        let n = r.usize("guidance", "n", gd.n)?;
        let guidance = GuidanceConfig::new(lambda, s, n)
            .map_err(|e| CliError::Config(format!("[guidance]: {e}")))?;
        let delta = r.usize("guidance", "delta", 16)?;
        let solver_name = r.str("guidance", "solver").unwrap_or("sde_euler");
        let solver = SolverKind::parse(solver_name)
            .ok_or_else(|| CliError::Config(format!("unknown solver {solver_name:?}")))?;

        let chains = r.usize("particles", "N", 4)?;
        let particles = match r.str("particles", "method").unwrap_or("independent") {
            "independent" => ParticleMode::Independent,
            "smc" => ParticleMode::Smc,
            "bon" => ParticleMode::Bon,
            "smc_bon" => ParticleMode::SmcBon,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown particle method {other:?}"
                )))
            }
        };
        let resample_every = r.usize("particles", "resample_every", 20)?;
        let mut smc = SmcConfig::new(chains.max(1), resample_every.max(1))?;
        if let Some(v) = r.str("particles", "resampling") {
            smc.resampling = Resampling::parse(v)
                .ok_or_else(|| CliError::Config(format!("unknown resampling {v:?}")))?;
        }
        if let Some(v) = r.str("particles", "potential") {
            smc.potential = Potential::parse(v)
                .ok_or_else(|| CliError::Config(format!("unknown potential {v:?}")))?;
        }

        let experiment = Experiment {
            seed: r.u64("experiment", "seed", 0)?,
            run_id: r.str("experiment", "run_id").unwrap_or("run").to_string(),
            repetitions: r.usize("experiment", "repetitions", 1)?,
            tv: r.bool("experiment", "tv", true)?,
            tv_bins: r.usize("experiment", "tv_bins", 200)?,
            tv_coord: r.usize("experiment", "tv_coord", 0)?,
            efr_trajectories: r.usize("experiment", "efr_trajectories", 0)?,
            efr_n_true: r.usize("experiment", "efr_n_true", 1000)?,
            share_pool: r.bool("experiment", "share_pool", true)?,
            record_wall: r.bool("experiment", "record_wall", false)?,
        };

        let cfg = RunConfig {
            context_id,
            model,
            reward,
            schedule,
            method,
            tau,
            grid,
            options,
            safe_d,
            sr,
            guidance,
            delta,
            solver,
            chains,
            particles,
            smc,
            experiment,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.tau == 0 {
            return bad("sampler.tau must be >= 1".into());
        }
        if self.delta == 0 {
            return bad("guidance.delta must be >= 1".into());
        }
        if self.chains == 0 {
            return bad("particles.N must be >= 1".into());
        }
        if self.smc.resample_every == 0 {
            return bad("particles.resample_every must be >= 1".into());
        }
        if self.experiment.repetitions == 0 {
            return bad("experiment.repetitions must be >= 1".into());
        }
        if self.experiment.tv_bins < 2 {
            return bad("experiment.tv_bins must be >= 2".into());
        }
        if self.experiment.tv_coord >= self.model.dim() {
            return bad(format!(
                "experiment.tv_coord {} out of range for dimension {}",
                self.experiment.tv_coord,
                self.model.dim()
            ));
        }
        if self.experiment.efr_trajectories > 0 && self.experiment.efr_n_true == 0 {
            return bad("experiment.efr_n_true must be >= 1".into());
        }
        if self.method == Method::Sr && !(self.sr.radius > 0.0) {
            return bad("sampler.sr_radius must be positive".into());
        }
        Ok(())
    }

    pub fn needs_pool(&self) -> bool {
        matches!(self.method, Method::Lidar | Method::SafeD | Method::Sr)
    }

    pub fn sampler_spec(&self) -> CliResult<SamplerSpec> {
        let grid = make_grid(&self.schedule, self.tau, self.grid)?;
        let mut spec = SamplerSpec::new(self.method, grid, self.options.stochastic)
            .with_guidance(self.guidance);
        spec.options = self.options;
        spec.safe_d = self.safe_d;
        spec.sr = self.sr;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
[model]
context_id = toy
weights = 0.5, 0.5
means = -1.5, 1.5
variances = 0.3, 0.3

[reward]
kind = negdist
centers = 1.5
";

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_raw(&RawConfig::parse(BASE).unwrap()).unwrap();
        assert_eq!(cfg.model.dim(), 1);
        assert_eq!(cfg.guidance, GuidanceConfig::new(10.0, 1.0, 256).unwrap());
        assert_eq!(cfg.tau, 64);
        assert_eq!(cfg.method, Method::Lidar);
        assert_eq!(cfg.context_id, "toy");
    }

    #[test]
    fn inline_comments_are_stripped() {
        let raw =
            RawConfig::parse("[model]\nweights = 1 ; one component\nmeans = 0 # origin\n").unwrap();
        assert_eq!(raw.get("model", "weights"), Some("1"));
        assert_eq!(raw.get("model", "means"), Some("0"));
    }

    #[test]
    fn typed_errors() {
        let with = |extra: &str| {
            RunConfig::from_raw(&RawConfig::parse(&format!("{BASE}{extra}")).unwrap())
        };
        assert!(matches!(
            with("[guidance]\nn = 0\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            with("[guidance]\nlambda = -1\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            with("[sampler]\nmethod = magic\n"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            with("[sampler]\ntau = 0\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RawConfig::parse("[model]\nfoo = 1\n"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RawConfig::parse("[nope]\nfoo = 1\n"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn sweep_axes_keep_declaration_order() {
        let raw = RawConfig::parse(&format!("{BASE}[sweep]\nN = 1, 2\nn = 4,8,16\n")).unwrap();
        assert_eq!(
            raw.sweep[0],
            ("N".to_string(), vec!["1".to_string(), "2".to_string()])
        );
        assert_eq!(raw.sweep[1].1.len(), 3);
        assert_eq!(RawConfig::resolve_axis("n"), Some(("guidance", "n")));
        assert_eq!(
            RawConfig::resolve_axis("sampler.grid"),
            Some(("sampler", "grid"))
        );
        assert_eq!(RawConfig::resolve_axis("bogus"), None);
    }

    #[test]
    fn isotropic_variances_broadcast() {
        let text = "[model]\nweights = 1\nmeans = 0, 1\nvariances = 2\n[reward]\nkind = linear\na = 1, 0\n";
        let cfg = RunConfig::from_raw(&RawConfig::parse(text).unwrap()).unwrap();
        assert_eq!(cfg.model.variances(), &[vec![2.0, 2.0]]);
    }
}
