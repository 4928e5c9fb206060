//! Evaluation metrics and the per-run CSV record.

use std::io::Write;

use rayon::prelude::*;

use crate::analytic_models::{GaussianMixture, Reward};
use crate::efr::{
    efr_naive_mc, efr_reformulated, efr_taylor, AnnotatedSamples, GuidanceConfig, InnerSolver,
};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, sub_seed};
use crate::samplers::{Method, Sampler, SamplerSpec};
use crate::schedule::{make_grid, GridKind, NoiseSchedule};
use crate::stats::mean_var;
use crate::vecops::dist;

/// Simpson panels per histogram bin for the oracle masses.
const SIMPSON_PANELS: usize = 8;

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let m = 2 * panels;
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `1/2 sum |p_i - q_i|` over matching cells.
pub fn tv_from_masses(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Argument(
            "mass vectors must be nonempty and of equal length".into(),
        ));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Histogram masses of `samples` on `bins` equal cells of `range`, followed by
/// one cell for everything outside the range.
pub fn histogram_masses(samples: &[f64], bins: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if bins < 2 || !(hi > lo) {
        return Err(Error::Argument(
            "need bins >= 2 and a nonempty range".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let mut counts = vec![0usize; bins + 1];
    let width = (hi - lo) / bins as f64;
    for &x in samples {
        let cell = if x >= lo && x < hi {
            (((x - lo) / width) as usize).min(bins - 1)
        } else if x == hi {
            bins - 1
        } else {
            bins
        };
        counts[cell] += 1;
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Oracle masses on the same cells as [`histogram_masses`].
pub fn oracle_masses(
    density: impl Fn(f64) -> f64,
    bins: usize,
    range: (f64, f64),
) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if bins < 2 || !(hi > lo) {
        return Err(Error::Argument(
            "need bins >= 2 and a nonempty range".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut masses: Vec<f64> = (0..bins)
        .map(|i| {
            let a = lo + i as f64 * width;
            simpson(&density, a, a + width, SIMPSON_PANELS)
        })
        .collect();
    let inside: f64 = masses.iter().sum();
    masses.push((1.0 - inside).max(0.0));
    Ok(masses)
}

/// Total variation between the empirical law of `samples` and a 1D density,
/// binned on `range` with an extra cell collecting the mass outside it.
pub fn tv_1d(
    samples: &[f64],
    density: impl Fn(f64) -> f64,
    bins: usize,
    range: (f64, f64),
) -> Result<f64> {
    let p = histogram_masses(samples, bins, range)?;
    let q = oracle_masses(density, bins, range)?;
    Ok(tv_from_masses(&p, &q)?.min(1.0))
}

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity(samples: &[Vec<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Argument(
            "diversity needs at least two samples".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(&samples[i], &samples[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfrErrors {
    pub mse_taylor: f64,
    pub mse_lidar: f64,
}

/// Settings of the accumulated EFR-error protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfrProtocol {
    pub trajectories: usize,
    pub tau: usize,
    pub n_true: usize,
    pub inner: InnerSolver,
    pub grid: GridKind,
}

impl EfrProtocol {
    pub fn new(trajectories: usize, tau: usize, n_true: usize) -> Self {
        Self {
            trajectories,
            tau,
            n_true,
            inner: InnerSolver::default(),
            grid: GridKind::Uniform,
        }
    }
}

/// Runs `K` LiDAR-guided trajectories and, at every grid state, compares the
/// Taylor and pool-based EFR estimates with a nested Monte Carlo reference.
/// Returns the squared errors summed over time and averaged over trajectories.
pub fn efr_error_protocol(
    model: &GaussianMixture,
    reward: &Reward,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    pool: &AnnotatedSamples,
    protocol: &EfrProtocol,
    seed: u64,
) -> Result<EfrErrors> {
    if protocol.trajectories == 0 || protocol.tau == 0 || protocol.n_true == 0 {
        return Err(Error::Argument("K, tau and n_true must all be >= 1".into()));
    }
    let grid = make_grid(schedule, protocol.tau, protocol.grid)?;
    let spec = SamplerSpec::new(Method::Lidar, grid, true)
        .with_guidance(*cfg)
        .with_trajectory(true);
    let sampler = Sampler::new(spec, model, reward, schedule, Some(pool))?;
    let inner_seed = sub_seed(seed, 0x0065_6672);
    let per_traj: Vec<(f64, f64)> = (0..protocol.trajectories as u64)
        .into_par_iter()
        .map(|k| {
            let out = sampler.run_chain(seed, k)?;
            let mut rng = stream_rng(inner_seed, k);
            let mut acc = (0.0, 0.0);
            for point in out.trajectory.unwrap_or_default() {
                let truth = efr_naive_mc(
                    model,
                    reward,
                    cfg,
                    schedule,
                    &protocol.inner,
                    &point.x,
                    point.t,
                    protocol.n_true,
                    &mut rng,
                )?
                .value;
                let taylor = efr_taylor(model, reward, cfg, &point.x, point.sigma)?.value;
                let lidar = efr_reformulated(pool, cfg, &point.x, point.sigma)?.value;
                acc.0 += (truth - taylor).powi(2);
                acc.1 += (truth - lidar).powi(2);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let k = protocol.trajectories as f64;
    Ok(EfrErrors {
        mse_taylor: per_traj.iter().map(|p| p.0).sum::<f64>() / k,
        mse_lidar: per_traj.iter().map(|p| p.1).sum::<f64>() / k,
    })
}

/// Identifying columns of a CSV row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMeta {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub n: Option<usize>,
    pub delta: Option<usize>,
    pub lambda: f64,
    pub s: f64,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub n: Option<usize>,
    pub delta: Option<usize>,
    pub lambda: f64,
    pub s: f64,
    pub chains: usize,
    pub tau: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub diversity: Option<f64>,
    pub tv: Option<f64>,
    pub efr_mse_taylor: Option<f64>,
    pub efr_mse_lidar: Option<f64>,
    pub score_evals: u64,
    pub wall_ms: Option<f64>,
}

/// Aggregates terminal samples and their per-chain evaluation counters.
/// Diversity is left empty for a single sample.
pub fn summarize(
    meta: RunMeta,
    samples: &[Vec<f64>],
    score_evals: &[u64],
    reward: &Reward,
) -> Result<RunRecord> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot summarize an empty run".into()));
    }
    let rewards: Vec<f64> = samples.iter().map(|x| reward.eval(x)).collect();
    let (mean_reward, var) = mean_var(&rewards);
    Ok(RunRecord {
        run_id: meta.run_id,
        method: meta.method,
        seed: meta.seed,
        n: meta.n,
        delta: meta.delta,
        lambda: meta.lambda,
        s: meta.s,
        chains: samples.len(),
        tau: meta.tau,
        mean_reward,
        std_reward: var.sqrt(),
        diversity: if samples.len() >= 2 {
            Some(diversity(samples)?)
        } else {
            None
        },
        tv: None,
        efr_mse_taylor: None,
        efr_mse_lidar: None,
        score_evals: score_evals.iter().sum(),
        wall_ms: None,
    })
}

pub const CSV_HEADER: [&str; 17] = [
    "run_id",
    "method",
    "seed",
    "n",
    "delta",
    "lambda",
    "s",
    "N",
    "tau",
    "mean_reward",
    "std_reward",
    "diversity",
    "tv",
    "efr_mse_taylor",
    "efr_mse_lidar",
    "score_evals",
    "wall_ms",
];

/// `printf("%.9g")` formatting.
pub fn format_g9(x: f64) -> String {
    const P: i32 = 9;
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_fraction(&format!("{:.*}", (P - 1 - exp) as usize, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(format_g9).unwrap_or_default()
}

impl RunRecord {
    pub fn fields(&self) -> [String; 17] {
        [
            self.run_id.clone(),
            self.method.clone(),
            self.seed.to_string(),
            opt(self.n),
            opt(self.delta),
            format_g9(self.lambda),
            format_g9(self.s),
            self.chains.to_string(),
            self.tau.to_string(),
            format_g9(self.mean_reward),
            format_g9(self.std_reward),
            opt_f(self.diversity),
            opt_f(self.tv),
            opt_f(self.efr_mse_taylor),
            opt_f(self.efr_mse_lidar),
            self.score_evals.to_string(),
            opt_f(self.wall_ms),
        ]
    }
}

/// Serializes rows behind the fixed header.
pub fn write_csv<W: Write>(out: W, records: &[RunRecord], with_header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
    if with_header {
        w.write_record(CSV_HEADER).map_err(io)?;
    }
    for r in records {
        w.write_record(r.fields()).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::Config(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, records, true).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic_models::normal_pdf;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn format_matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.25, "0.25"),
            (-3.5, "-3.5"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (2.0 / 3.0 * 1e-7, "6.66666667e-08"),
            (100.0, "100"),
            (99999999.95, "100000000"),
            (999999999.5, "1e+09"),
        ];
        for (x, s) in cases {
            assert_eq!(format_g9(x), s, "{x}");
        }
    }

    #[test]
    fn tv_examples() {
        let mut rng = stream_rng(4, 0);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
        let tv = tv_1d(&xs, |x| normal_pdf(x, 0.0, 1.0), 200, (-5.0, 5.0)).unwrap();
        assert!(tv < 0.05, "{tv}");
        let far: Vec<f64> = xs.iter().map(|x| x + 50.0).collect();
        assert!(tv_1d(&far, |x| normal_pdf(x, 0.0, 1.0), 200, (-5.0, 5.0)).unwrap() >= 0.99);
        let q = oracle_masses(|x| normal_pdf(x, 0.0, 1.0), 50, (-4.0, 4.0)).unwrap();
        assert_eq!(tv_from_masses(&q, &q).unwrap(), 0.0);
        assert!(tv_1d(&[], |_| 0.0, 10, (0.0, 1.0)).is_err());
        assert!(tv_1d(&[0.5], |_| 1.0, 1, (0.0, 1.0)).is_err());
    }

    #[test]
    fn oracle_masses_sum_to_one() {
        let q = oracle_masses(|x| normal_pdf(x, 1.0, 2.0), 200, (-9.0, 11.0)).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(q[200] < 1e-6);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&vec![vec![1.0, 2.0]; 4]).unwrap(), 0.0);
        assert_eq!(diversity(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(), 5.0);
        assert!((diversity(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(diversity(&[vec![0.0]]).is_err());
    }

    #[test]
    fn summarize_cases() {
        let r = Reward::linear(vec![1.0]);
        assert!(summarize(RunMeta::default(), &[], &[], &r).is_err());
        let one = summarize(RunMeta::default(), &[vec![2.0]], &[7], &r).unwrap();
        assert_eq!(one.std_reward, 0.0);
        assert_eq!(one.diversity, None);
        let many = summarize(RunMeta::default(), &[vec![1.0], vec![3.0]], &[5, 6], &r).unwrap();
        assert_eq!(many.score_evals, 11);
        assert_eq!(many.mean_reward, 2.0);
        assert_eq!(many.diversity, Some(2.0));
    }

    #[test]
    fn csv_layout() {
        let r = Reward::linear(vec![1.0]);
        let meta = RunMeta {
            run_id: "a,b".into(),
            method: "lidar".into(),
            seed: 3,
            n: Some(16),
            delta: None,
            lambda: 10.0,
            s: 1.0,
            tau: 64,
        };
        let rec = summarize(meta, &[vec![1.0], vec![2.0]], &[64, 64], &r).unwrap();
        let text = records_to_csv(&[rec]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "\"a,b\",lidar,3,16,,10,1,2,64,1.5,0.707106781,1,,,,128,"
        );
    }

    #[test]
    fn protocol_is_exactly_zero_without_tilt() {
        let m = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.3], vec![0.3]],
        )
        .unwrap();
        let r = Reward::neg_dist(vec![vec![1.0]]);
        let cfg = GuidanceConfig::new(0.0, 1.0, 50).unwrap();
        let mut rng = stream_rng(1, 0);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| m.sample(&mut rng)).collect();
        let rw: Vec<f64> = pts.iter().map(|p| r.eval(p)).collect();
        let pool = AnnotatedSamples::new(&pts, &rw).unwrap();
        let e = efr_error_protocol(
            &m,
            &r,
            &cfg,
            &NoiseSchedule::default(),
            &pool,
            &EfrProtocol::new(3, 8, 20),
            0,
        )
        .unwrap();
        assert_eq!(
            e,
            EfrErrors {
                mse_taylor: 0.0,
                mse_lidar: 0.0
            }
        );
    }
}
