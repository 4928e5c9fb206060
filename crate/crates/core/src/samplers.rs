//! Reverse-process samplers.
//!
//! Every method shares one Euler solver; guidance enters as an offset added
//! to the Stein score before the step. Methods that steer the Tweedie mean
//! instead (Safe-D, SR) map an `x0`-space shift `delta` to the score offset
//! `delta / sigma^2`, which is the same move under Tweedie's formula.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analytic_models::{GaussianMixture, Reward};
use crate::efr::{AnnotatedSamples, GuidanceConfig, Workspace};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::vecops::{norm, sq_dist};

/// How the variance of one reverse step is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `g(t_hi)^2 (t_hi - t_lo)`, the left-point Euler-Maruyama rule in `t`.
    #[default]
    Tangent,
    /// `sigma^2(t_hi) - sigma^2(t_lo)`, the exact integral of `g^2`.
    VarianceExact,
}

impl StepRule {
    pub fn increment(&self, schedule: &NoiseSchedule, t_hi: f64, t_lo: f64) -> Result<f64> {
        if t_hi < t_lo {
            return Err(Error::Domain(format!(
                "step runs backwards: t_hi {t_hi} < t_lo {t_lo}"
            )));
        }
        match self {
            StepRule::VarianceExact => schedule.variance_increment(t_hi, t_lo),
            StepRule::Tangent => {
                if t_hi == t_lo {
                    return Ok(0.0);
                }
                let g = schedule.diffusion_coefficient(t_hi)?;
                schedule.sigma_at(t_lo)?;
                Ok(g * g * (t_hi - t_lo))
            }
        }
    }
}

/// One reverse step with variance increment `increment`:
/// SDE `x += inc * score + sqrt(inc) * z`, probability-flow ODE
/// `x += inc * score / 2`.
pub fn reverse_step(
    x: &mut [f64],
    score: &[f64],
    increment: f64,
    stochastic: bool,
    mut noise: impl FnMut() -> f64,
) {
    if stochastic {
        let scale = increment.sqrt();
        for (xi, si) in x.iter_mut().zip(score) {
            *xi += increment * si + scale * noise();
        }
    } else {
        for (xi, si) in x.iter_mut().zip(score) {
            *xi += 0.5 * increment * si;
        }
    }
}

/// A single reverse chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub step_index: usize,
    pub score_evals: u64,
    pub rng: StreamRng,
}

impl ChainState {
    /// Starts a chain at a prior draw `x_T ~ N(0, sigma_max^2 I)` using stream
    /// `chain_index` of `seed`.
    pub fn from_prior(dim: usize, schedule: &NoiseSchedule, seed: u64, chain_index: u64) -> Self {
        let mut rng = stream_rng(seed, chain_index);
        let x = (0..dim)
            .map(|_| schedule.sigma_max() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            x,
            step_index: 0,
            score_evals: 0,
            rng,
        }
    }

    pub fn at(x: Vec<f64>, rng: StreamRng) -> Self {
        Self {
            x,
            step_index: 0,
            score_evals: 0,
            rng,
        }
    }
}

/// Score modification applied on top of the model score.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    None,
    /// Closed-form lookahead guidance, weighted by `cfg.s`.
    Lidar {
        pool: &'a AnnotatedSamples,
        cfg: GuidanceConfig,
    },
    /// `lambda * grad_{x_t} r(x0_bar(x_t))` through the analytic Tweedie Jacobian.
    Gradient {
        reward: &'a Reward,
        lambda: f64,
    },
    /// Safe-D repulsion from a reference set.
    SafeD {
        refs: &'a [Vec<f64>],
        scale: f64,
        beta: f64,
    },
    /// Shielded repulsion: push `x0_bar` out of balls of `radius` around the references.
    Sr {
        refs: &'a [Vec<f64>],
        scale: f64,
        radius: f64,
    },
}

/// Per-step numerics shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOptions {
    pub stochastic: bool,
    pub rule: StepRule,
}

impl StepOptions {
    pub fn new(stochastic: bool) -> Self {
        Self {
            stochastic,
            rule: StepRule::default(),
        }
    }
}

/// Model score and Tweedie mean at a state, before guidance.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub score: Vec<f64>,
    pub tweedie: Vec<f64>,
    pub sigma: f64,
}

/// Offset `delta / sigma^2` for the Safe-D shift
/// `delta = scale * beta * (x0_bar - sum_i ref_i softmax_i(-||x - ref_i||^2 / 2 sigma^2))`.
pub fn safe_d_shift(
    x: &[f64],
    tweedie: &[f64],
    sigma: f64,
    refs: &[Vec<f64>],
    scale: f64,
    beta: f64,
) -> Vec<f64> {
    let mut logits: Vec<f64> = refs
        .iter()
        .map(|r| -sq_dist(x, r) / (2.0 * sigma * sigma))
        .collect();
    crate::vecops::softmax_in_place(&mut logits);
    let mut centroid = vec![0.0; x.len()];
    for (w, r) in logits.iter().zip(refs) {
        for (c, ri) in centroid.iter_mut().zip(r) {
            *c += w * ri;
        }
    }
    tweedie
        .iter()
        .zip(&centroid)
        .map(|(m, c)| scale * beta * (m - c))
        .collect()
}

/// SR shift `delta = scale * sum_i relu(radius / ||x0_bar - ref_i|| - 1) (x0_bar - ref_i)`;
/// references coinciding with `x0_bar` contribute nothing.
pub fn sr_shift(tweedie: &[f64], refs: &[Vec<f64>], scale: f64, radius: f64) -> Vec<f64> {
    let mut delta = vec![0.0; tweedie.len()];
    for r in refs {
        let diff: Vec<f64> = tweedie.iter().zip(r).map(|(m, ri)| m - ri).collect();
        let d = norm(&diff);
        if d == 0.0 {
            continue;
        }
        let factor = (radius / d - 1.0).max(0.0);
        if factor == 0.0 {
            continue;
        }
        for (o, di) in delta.iter_mut().zip(&diff) {
            *o += scale * factor * di;
        }
    }
    delta
}

/// `grad_{x_t} r(x0_bar(x_t)) = (I + sigma^2 H)^T grad r(x0_bar)`, H the
/// Hessian of the perturbed log-density.
pub fn tweedie_reward_gradient(
    model: &GaussianMixture,
    reward: &Reward,
    x: &[f64],
    sigma: f64,
) -> Vec<f64> {
    let d = x.len();
    let tweedie = model.tweedie_mean(x, sigma);
    let gr = reward.gradient(&tweedie);
    let h = model.score_hessian(x, sigma);
    let s2 = sigma * sigma;
    (0..d)
        .map(|j| {
            (0..d)
                .map(|i| {
                    let jac = if i == j { 1.0 } else { 0.0 } + s2 * h[i * d + j];
                    jac * gr[i]
                })
                .sum()
        })
        .collect()
}

/// Evaluates the model score and Tweedie mean at the state (one score evaluation).
pub fn evaluate(
    state: &mut ChainState,
    model: &GaussianMixture,
    sigma: f64,
    eval: &mut Evaluation,
) {
    eval.score.resize(state.x.len(), 0.0);
    model.perturbed_score_into(&state.x, sigma, &mut eval.score);
    let s2 = sigma * sigma;
    eval.tweedie.clear();
    eval.tweedie
        .extend(state.x.iter().zip(&eval.score).map(|(x, s)| x + s2 * s));
    eval.sigma = sigma;
    state.score_evals += 1;
}

/// Adds the guidance offset to `eval.score` in place and charges any extra
/// model evaluations the method needs.
pub fn apply_guidance(
    state: &mut ChainState,
    model: &GaussianMixture,
    guidance: &Guidance<'_>,
    eval: &mut Evaluation,
    ws: &mut Workspace,
) -> Result<()> {
    let sigma = eval.sigma;
    match *guidance {
        Guidance::None => {}
        Guidance::Lidar { pool, cfg } => {
            if pool.dim() != state.x.len() {
                return Err(Error::Config(
                    "pool dimension does not match the model".into(),
                ));
            }
            if cfg.s != 0.0 {
                let mut g = vec![0.0; state.x.len()];
                pool.gradient_into(cfg.lambda, &state.x, sigma, &mut g, ws);
                for (s, gi) in eval.score.iter_mut().zip(&g) {
                    *s += cfg.s * gi;
                }
            }
        }
        Guidance::Gradient { reward, lambda } => {
            // Backpropagating through the denoiser costs a second pass.
            state.score_evals += 1;
            if lambda != 0.0 {
                let g = tweedie_reward_gradient(model, reward, &state.x, sigma);
                for (s, gi) in eval.score.iter_mut().zip(&g) {
                    *s += lambda * gi;
                }
            }
        }
        Guidance::SafeD { refs, scale, beta } => {
            if refs.is_empty() {
                return Err(Error::Config(
                    "Safe-D needs a nonempty reference set".into(),
                ));
            }
            if scale != 0.0 {
                let delta = safe_d_shift(&state.x, &eval.tweedie, sigma, refs, scale, beta);
                for (s, di) in eval.score.iter_mut().zip(&delta) {
                    *s += di / (sigma * sigma);
                }
            }
        }
        Guidance::Sr {
            refs,
            scale,
            radius,
        } => {
            if refs.is_empty() || !(radius > 0.0) {
                return Err(Error::Config(
                    "SR needs references and a positive radius".into(),
                ));
            }
            if scale != 0.0 {
                let delta = sr_shift(&eval.tweedie, refs, scale, radius);
                for (s, di) in eval.score.iter_mut().zip(&delta) {
                    *s += di / (sigma * sigma);
                }
            }
        }
    }
    Ok(())
}

/// Moves the state from `t_hi` to `t_lo` with an already guided score.
pub fn advance(
    state: &mut ChainState,
    schedule: &NoiseSchedule,
    score: &[f64],
    t_hi: f64,
    t_lo: f64,
    opts: StepOptions,
) -> Result<()> {
    let inc = opts.rule.increment(schedule, t_hi, t_lo)?;
    let rng = &mut state.rng;
    reverse_step(&mut state.x, score, inc, opts.stochastic, || {
        rng.sample(StandardNormal)
    });
    state.step_index += 1;
    Ok(())
}

/// One guided reverse step from `t_hi` to `t_lo`.
pub fn step_guided(
    state: &mut ChainState,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    guidance: &Guidance<'_>,
    t_hi: f64,
    t_lo: f64,
    opts: StepOptions,
) -> Result<()> {
    let mut eval = Evaluation::default();
    evaluate(state, model, schedule.sigma_at(t_hi)?, &mut eval);
    apply_guidance(state, model, guidance, &mut eval, &mut Workspace::default())?;
    advance(state, schedule, &eval.score, t_hi, t_lo, opts)
}

pub fn step_vanilla(
    state: &mut ChainState,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    t_hi: f64,
    t_lo: f64,
    stochastic: bool,
) -> Result<()> {
    step_guided(
        state,
        model,
        schedule,
        &Guidance::None,
        t_hi,
        t_lo,
        StepOptions::new(stochastic),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn step_lidar(
    state: &mut ChainState,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    pool: &AnnotatedSamples,
    cfg: &GuidanceConfig,
    t_hi: f64,
    t_lo: f64,
    stochastic: bool,
) -> Result<()> {
    let g = Guidance::Lidar { pool, cfg: *cfg };
    step_guided(
        state,
        model,
        schedule,
        &g,
        t_hi,
        t_lo,
        StepOptions::new(stochastic),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn step_grad_guidance(
    state: &mut ChainState,
    model: &GaussianMixture,
    reward: &Reward,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    t_hi: f64,
    t_lo: f64,
    stochastic: bool,
) -> Result<()> {
    let g = Guidance::Gradient {
        reward,
        lambda: cfg.lambda,
    };
    step_guided(
        state,
        model,
        schedule,
        &g,
        t_hi,
        t_lo,
        StepOptions::new(stochastic),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn step_safe_d(
    state: &mut ChainState,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    refs: &[Vec<f64>],
    scale: f64,
    beta: f64,
    t_hi: f64,
    t_lo: f64,
    stochastic: bool,
) -> Result<()> {
    let g = Guidance::SafeD { refs, scale, beta };
    step_guided(
        state,
        model,
        schedule,
        &g,
        t_hi,
        t_lo,
        StepOptions::new(stochastic),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn step_sr(
    state: &mut ChainState,
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    refs: &[Vec<f64>],
    scale: f64,
    radius: f64,
    t_hi: f64,
    t_lo: f64,
    stochastic: bool,
) -> Result<()> {
    let g = Guidance::Sr {
        refs,
        scale,
        radius,
    };
    step_guided(
        state,
        model,
        schedule,
        &g,
        t_hi,
        t_lo,
        StepOptions::new(stochastic),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Vanilla,
    Lidar,
    GradGuidance,
    SafeD,
    Sr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Lidar => "lidar",
            Method::GradGuidance => "grad_guidance",
            Method::SafeD => "safe_d",
            Method::Sr => "sr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "vanilla" => Method::Vanilla,
            "lidar" => Method::Lidar,
            "grad_guidance" => Method::GradGuidance,
            "safe_d" => Method::SafeD,
            "sr" => Method::Sr,
            _ => return None,
        })
    }
}

/// Safe-D hyperparameters; `refs` lowest-reward pool samples form the reference set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeDParams {
    pub scale: f64,
    pub beta: f64,
    pub refs: usize,
}

impl Default for SafeDParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            beta: 0.05,
            refs: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrParams {
    pub scale: f64,
    pub radius: f64,
    pub refs: usize,
}

impl Default for SrParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            radius: 1.0,
            refs: 40,
        }
    }
}

/// Everything that defines a reverse-process run except the seed.
#[derive(Debug, Clone)]
pub struct SamplerSpec {
    pub method: Method,
    pub grid: TimeGrid,
    pub options: StepOptions,
    pub guidance: GuidanceConfig,
    pub safe_d: SafeDParams,
    pub sr: SrParams,
    pub keep_trajectory: bool,
}

impl SamplerSpec {
    pub fn new(method: Method, grid: TimeGrid, stochastic: bool) -> Self {
        Self {
            method,
            grid,
            options: StepOptions::new(stochastic),
            guidance: GuidanceConfig::default(),
            safe_d: SafeDParams::default(),
            sr: SrParams::default(),
            keep_trajectory: false,
        }
    }

    pub fn with_guidance(mut self, cfg: GuidanceConfig) -> Self {
        self.guidance = cfg;
        self
    }

    pub fn with_trajectory(mut self, keep: bool) -> Self {
        self.keep_trajectory = keep;
        self
    }
}

/// State recorded at a grid time, before the step leaving it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub sigma: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub x_final: Vec<f64>,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    pub score_evals: u64,
}

/// A validated [`SamplerSpec`] bound to its model, reward, schedule and pool.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    spec: SamplerSpec,
    model: &'a GaussianMixture,
    reward: &'a Reward,
    schedule: &'a NoiseSchedule,
    pool: Option<&'a AnnotatedSamples>,
    refs: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        spec: SamplerSpec,
        model: &'a GaussianMixture,
        reward: &'a Reward,
        schedule: &'a NoiseSchedule,
        pool: Option<&'a AnnotatedSamples>,
    ) -> Result<Self> {
        reward
            .validate(model.dim())
            .map_err(|e| Error::Config(e.to_string()))?;
        let needs_pool = matches!(spec.method, Method::Lidar | Method::SafeD | Method::Sr);
        if needs_pool && pool.is_none() {
            return Err(Error::Config(format!(
                "method {} needs a lookahead pool",
                spec.method.name()
            )));
        }
        if let Some(p) = pool {
            if p.dim() != model.dim() {
                return Err(Error::Config(format!(
                    "pool dimension {} does not match model dimension {}",
                    p.dim(),
                    model.dim()
                )));
            }
        }
        let refs = match (spec.method, pool) {
            (Method::SafeD, Some(p)) => p.lowest_reward(spec.safe_d.refs.max(1)),
            (Method::Sr, Some(p)) => p.lowest_reward(spec.sr.refs.max(1)),
            _ => Vec::new(),
        };
        if spec.method == Method::Sr && !(spec.sr.radius > 0.0) {
            return Err(Error::Config("SR radius must be positive".into()));
        }
        Ok(Self {
            spec,
            model,
            reward,
            schedule,
            pool,
            refs,
        })
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    pub fn model(&self) -> &GaussianMixture {
        self.model
    }

    pub fn reward(&self) -> &Reward {
        self.reward
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    pub fn pool(&self) -> Option<&AnnotatedSamples> {
        self.pool
    }

    pub fn guidance(&self) -> Guidance<'_> {
        match self.spec.method {
            Method::Vanilla => Guidance::None,
            Method::Lidar => Guidance::Lidar {
                pool: self.pool.expect("checked at construction"),
                cfg: self.spec.guidance,
            },
            Method::GradGuidance => Guidance::Gradient {
                reward: self.reward,
                lambda: self.spec.guidance.lambda,
            },
            Method::SafeD => Guidance::SafeD {
                refs: &self.refs,
                scale: self.spec.safe_d.scale,
                beta: self.spec.safe_d.beta,
            },
            Method::Sr => Guidance::Sr {
                refs: &self.refs,
                scale: self.spec.sr.scale,
                radius: self.spec.sr.radius,
            },
        }
    }

    pub fn init_chain(&self, seed: u64, chain_index: u64) -> ChainState {
        ChainState::from_prior(self.model.dim(), self.schedule, seed, chain_index)
    }

    /// Score evaluation at grid time `t_hi`, with guidance applied.
    pub fn evaluate(
        &self,
        state: &mut ChainState,
        t_hi: f64,
        eval: &mut Evaluation,
        ws: &mut Workspace,
    ) -> Result<()> {
        evaluate(state, self.model, self.schedule.sigma_at(t_hi)?, eval);
        apply_guidance(state, self.model, &self.guidance(), eval, ws)
    }

    pub fn advance(
        &self,
        state: &mut ChainState,
        score: &[f64],
        t_hi: f64,
        t_lo: f64,
    ) -> Result<()> {
        advance(state, self.schedule, score, t_hi, t_lo, self.spec.options)
    }

    /// Runs chain `chain_index` of `seed` over the whole grid.
    pub fn run_chain(&self, seed: u64, chain_index: u64) -> Result<ChainOutput> {
        let mut state = self.init_chain(seed, chain_index);
        let mut eval = Evaluation::default();
        let mut ws = Workspace::default();
        let mut trajectory = self.spec.keep_trajectory.then(Vec::new);
        for (t_hi, t_lo) in self.spec.grid.intervals() {
            if let Some(tr) = trajectory.as_mut() {
                tr.push(TrajectoryPoint {
                    t: t_hi,
                    sigma: self.schedule.sigma_at(t_hi)?,
                    x: state.x.clone(),
                });
            }
            self.evaluate(&mut state, t_hi, &mut eval, &mut ws)?;
            self.advance(&mut state, &eval.score, t_hi, t_lo)?;
        }
        Ok(ChainOutput {
            x_final: state.x,
            trajectory,
            score_evals: state.score_evals,
        })
    }

    /// Runs chains `0..count` in parallel; output order is chain order.
    pub fn run_chains(&self, seed: u64, count: usize) -> Result<Vec<ChainOutput>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.run_chain(seed, i))
            .collect()
    }
}

/// Free-function form of [`Sampler::run_chain`].
pub fn run_chain(
    spec: &SamplerSpec,
    model: &GaussianMixture,
    reward: &Reward,
    schedule: &NoiseSchedule,
    pool: Option<&AnnotatedSamples>,
    seed: u64,
) -> Result<ChainOutput> {
    Sampler::new(spec.clone(), model, reward, schedule, pool)?.run_chain(seed, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_grid, GridKind};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn state(x: Vec<f64>, seed: u64) -> ChainState {
        ChainState::at(x, stream_rng(seed, 0))
    }

    #[test]
    fn zero_interval_only_bumps_counters() {
        let m = GaussianMixture::standard_normal(2);
        for stochastic in [true, false] {
            for rule in [StepRule::VarianceExact, StepRule::Tangent] {
                let mut s = state(vec![0.4, -1.0], 1);
                let opts = StepOptions { stochastic, rule };
                step_guided(&mut s, &m, &schedule(), &Guidance::None, 0.5, 0.5, opts).unwrap();
                assert_eq!(s.x, vec![0.4, -1.0]);
                assert_eq!(s.score_evals, 1);
                assert_eq!(s.step_index, 1);
            }
        }
    }

    #[test]
    fn tangent_rule_noise_scale_is_g_sqrt_dt() {
        let sch = schedule();
        let (t_hi, t_lo) = (0.6, 0.55);
        let inc = StepRule::Tangent.increment(&sch, t_hi, t_lo).unwrap();
        let score = [0.3];
        let mut with_noise = [1.0];
        let mut without = [1.0];
        reverse_step(&mut with_noise, &score, inc, true, || 1.0);
        reverse_step(&mut without, &score, inc, true, || 0.0);
        let expected = sch.diffusion_coefficient(t_hi).unwrap() * (t_hi - t_lo).sqrt();
        assert!((with_noise[0] - without[0] - expected).abs() < 1e-14);
        let exact = StepRule::VarianceExact.increment(&sch, t_hi, t_lo).unwrap();
        let mut a = [1.0];
        let mut b = [1.0];
        reverse_step(&mut a, &score, exact, true, || 1.0);
        reverse_step(&mut b, &score, exact, true, || 0.0);
        assert!((a[0] - b[0] - exact.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn backwards_steps_are_rejected() {
        let m = GaussianMixture::standard_normal(1);
        let mut s = state(vec![0.0], 1);
        assert!(step_vanilla(&mut s, &m, &schedule(), 0.2, 0.4, true).is_err());
    }

    #[test]
    fn deterministic_chain_recovers_a_single_gaussian() {
        // The deterministic flow keeps a sqrt(v / (v + sigma_max^2)) share of the
        // prior's mean offset, so a narrow base keeps that bias under 5%.
        let m = GaussianMixture::gaussian(vec![1.0], vec![0.1]).unwrap();
        let sch = schedule();
        let grid = make_grid(&sch, 2048, GridKind::Uniform).unwrap();
        let r = Reward::linear(vec![0.0]);
        let sampler = Sampler::new(
            SamplerSpec::new(Method::Vanilla, grid, false),
            &m,
            &r,
            &sch,
            None,
        )
        .unwrap();
        let outs = sampler.run_chains(3, 10_000).unwrap();
        let xs: Vec<f64> = outs.iter().map(|o| o.x_final[0]).collect();
        let (mean, var) = crate::stats::mean_var(&xs);
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!((var - 0.1).abs() / 0.1 < 0.05, "var {var}");
    }

    fn random_pool(n: usize) -> AnnotatedSamples {
        let mut rng = stream_rng(77, 0);
        let s: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        AnnotatedSamples::new(&s, &r).unwrap()
    }

    #[test]
    fn degenerate_guidance_is_bitwise_vanilla() {
        let m = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![vec![-1.0], vec![2.0]],
            vec![vec![0.3], vec![0.6]],
        )
        .unwrap();
        let sch = schedule();
        let pool = random_pool(12);
        let constant = AnnotatedSamples::new(
            &pool.points().map(<[f64]>::to_vec).collect::<Vec<_>>(),
            &[0.25; 12],
        )
        .unwrap();
        let zero_s = GuidanceConfig::new(5.0, 0.0, 12).unwrap();
        let full = GuidanceConfig::new(5.0, 2.0, 12).unwrap();
        let r = Reward::linear(vec![1.0]);
        let refs = vec![vec![0.5]];
        for stochastic in [true, false] {
            for (t_hi, t_lo) in [(0.9, 0.7), (0.3, 0.1)] {
                let mut v = state(vec![0.7], 9);
                step_vanilla(&mut v, &m, &sch, t_hi, t_lo, stochastic).unwrap();
                let mut a = state(vec![0.7], 9);
                step_lidar(&mut a, &m, &sch, &pool, &zero_s, t_hi, t_lo, stochastic).unwrap();
                let mut b = state(vec![0.7], 9);
                step_lidar(&mut b, &m, &sch, &constant, &full, t_hi, t_lo, stochastic).unwrap();
                let mut c = state(vec![0.7], 9);
                let zero_l = GuidanceConfig::new(0.0, 1.0, 1).unwrap();
                step_grad_guidance(&mut c, &m, &r, &zero_l, &sch, t_hi, t_lo, stochastic).unwrap();
                let mut d = state(vec![0.7], 9);
                step_safe_d(&mut d, &m, &sch, &refs, 0.0, 0.05, t_hi, t_lo, stochastic).unwrap();
                let mut e = state(vec![0.7], 9);
                step_sr(&mut e, &m, &sch, &refs, 0.0, 1.0, t_hi, t_lo, stochastic).unwrap();
                for other in [&a, &b, &c, &d, &e] {
                    assert_eq!(other.x[0].to_bits(), v.x[0].to_bits());
                }
                assert_eq!(a.score_evals, 1);
                assert_eq!(c.score_evals, 2);
            }
        }
    }

    #[test]
    fn gradient_guidance_on_a_gaussian_is_a_scaled_constant() {
        // Tweedie map of N(mu, v) is linear with slope v / (v + sigma^2).
        let m = GaussianMixture::gaussian(vec![0.3, -0.2], vec![0.8, 1.7]).unwrap();
        let r = Reward::linear(vec![1.5, -0.5]);
        for sigma in [0.2, 1.0, 3.0] {
            for x in [[0.0, 0.0], [2.0, -1.0]] {
                let g = tweedie_reward_gradient(&m, &r, &x, sigma);
                let expected = [
                    1.5 * 0.8 / (0.8 + sigma * sigma),
                    -0.5 * 1.7 / (1.7 + sigma * sigma),
                ];
                for (a, b) in g.iter().zip(&expected) {
                    assert!((a - b).abs() / b.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_guidance_matches_finite_differences() {
        let m = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.5], vec![1.5, -0.5]],
            vec![vec![0.5, 1.0], vec![0.8, 0.3]],
        )
        .unwrap();
        let rewards = [
            Reward::quadratic(vec![0.5, 0.2], vec![1.0, -1.0]),
            Reward::neg_dist(vec![vec![3.0, 3.0]]),
        ];
        let mut rng = stream_rng(8, 0);
        for i in 0..50 {
            let r = &rewards[i % 2];
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let sigma = rng.random_range(0.2..3.0);
            let g = tweedie_reward_gradient(&m, r, &x, sigma);
            let h = 1e-5;
            for k in 0..2 {
                let mut p = x;
                let mut q = x;
                p[k] += h;
                q[k] -= h;
                let fd = (r.eval(&m.tweedie_mean(&p, sigma)) - r.eval(&m.tweedie_mean(&q, sigma)))
                    / (2.0 * h);
                let scale = g.iter().map(|v| v.abs()).fold(1e-6, f64::max);
                assert!((g[k] - fd).abs() / scale < 1e-4, "{} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn safe_d_shift_cases() {
        let x = [0.3, -0.2];
        let tweedie = [0.5, 0.1];
        // Single reference at the Tweedie mean itself.
        let d = safe_d_shift(&x, &tweedie, 0.7, &[tweedie.to_vec()], 1.0, 0.05);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        // Far references at equal distance: kernel weights are uniform.
        let refs = vec![
            vec![100.0, 0.0],
            vec![-100.0, 0.0],
            vec![0.0, 100.0],
            vec![0.0, -100.0],
        ];
        let d = safe_d_shift(&[0.0, 0.0], &tweedie, 50.0, &refs, 2.0, 0.1);
        for (di, m) in d.iter().zip(&tweedie) {
            assert!((di - 2.0 * 0.1 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn sr_shift_cases() {
        let tweedie = [0.0, 0.0];
        let far = vec![vec![5.0, 0.0], vec![0.0, -3.0]];
        assert_eq!(sr_shift(&tweedie, &far, 1.0, 2.0), vec![0.0, 0.0]);
        let near = vec![vec![1.0, 0.0]];
        let d = sr_shift(&tweedie, &near, 3.0, 2.0);
        // relu(2 / 1 - 1) = 1, magnitude 3 * 1 * (radius / 2).
        assert!((norm(&d) - 3.0 * 1.0).abs() < 1e-15);
        assert_eq!(d, vec![-3.0, 0.0]);
        assert_eq!(
            sr_shift(&tweedie, &[vec![0.0, 0.0]], 1.0, 2.0),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn lidar_without_pool_is_a_configuration_error() {
        let m = GaussianMixture::standard_normal(1);
        let sch = schedule();
        let grid = make_grid(&sch, 4, GridKind::Uniform).unwrap();
        let err = run_chain(
            &SamplerSpec::new(Method::Lidar, grid, true),
            &m,
            &Reward::linear(vec![1.0]),
            &sch,
            None,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn score_eval_counters_per_method() {
        let m = GaussianMixture::standard_normal(1);
        let sch = schedule();
        let r = Reward::linear(vec![1.0]);
        let pool = random_pool(8);
        let tau = 17;
        let grid = make_grid(&sch, tau, GridKind::Uniform).unwrap();
        for (method, per_step) in [
            (Method::Vanilla, 1),
            (Method::Lidar, 1),
            (Method::GradGuidance, 2),
            (Method::SafeD, 1),
            (Method::Sr, 1),
        ] {
            let spec = SamplerSpec::new(method, grid.clone(), true);
            let out = run_chain(&spec, &m, &r, &sch, Some(&pool), 4).unwrap();
            assert_eq!(out.score_evals, per_step * tau as u64, "{method:?}");
        }
    }

    #[test]
    fn chains_are_reproducible_and_streams_differ() {
        let m = GaussianMixture::standard_normal(2);
        let sch = schedule();
        let grid = make_grid(&sch, 8, GridKind::Uniform).unwrap();
        let spec = SamplerSpec::new(Method::Vanilla, grid, true).with_trajectory(true);
        let r = Reward::linear(vec![1.0, 0.0]);
        let s = Sampler::new(spec, &m, &r, &sch, None).unwrap();
        let a = s.run_chain(5, 3).unwrap();
        let b = s.run_chain(5, 3).unwrap();
        let c = s.run_chain(5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x_final, c.x_final);
        assert_eq!(a.trajectory.as_ref().unwrap().len(), 8);
    }
}
