//! Self-checks behind `tilted verify`: the marginal-sample EFR against nested
//! Monte Carlo, the closed-form gradient against finite differences, and the
//! weight-vector properties.

use rand::Rng;
use tilted_core::analytic_models::{GaussianMixture, Reward};
use tilted_core::efr::{
    efr_naive_mc, efr_reformulated, lidar_gradient, softmax_weights, AnnotatedSamples,
    GuidanceConfig, InnerSolver,
};
use tilted_core::rng::{stream_rng, StreamRng};
use tilted_core::schedule::NoiseSchedule;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub lambda: f64,
    pub seed: u64,
    /// Flips the sign of the analytic gradient to prove the check can fail.
    pub corrupt_gradient: bool,
}

/// Samples used on each side of the EFR equivalence check.
pub const EQUIVALENCE_SAMPLES: usize = 100_000;

/// `log E[exp(x0) | x_t = 0]` for a N(0, 1) prior at unit noise: the posterior
/// is N(0, 1/2), so the log-MGF at 1 is 1/4.
pub const EQUIVALENCE_TARGET: f64 = 0.25;

pub fn efr_equivalence(seed: u64) -> CliResult<CheckResult> {
    let model = GaussianMixture::standard_normal(1);
    let reward = Reward::linear(vec![1.0]);
    let schedule = NoiseSchedule::default();
    let cfg = GuidanceConfig::new(1.0, 1.0, EQUIVALENCE_SAMPLES)?;
    let t = schedule.time_of_sigma(1.0)?;
    let mut rng = stream_rng(seed, 0);
    let naive = efr_naive_mc(
        &model,
        &reward,
        &cfg,
        &schedule,
        &InnerSolver::default(),
        &[0.0],
        t,
        EQUIVALENCE_SAMPLES,
        &mut rng,
    )?
    .value;
    let mut rng = stream_rng(seed, 1);
    let points: Vec<Vec<f64>> = (0..EQUIVALENCE_SAMPLES)
        .map(|_| model.sample(&mut rng))
        .collect();
    let rewards: Vec<f64> = points.iter().map(|p| reward.eval(p)).collect();
    let pool = AnnotatedSamples::new(&points, &rewards)?.from_exact_distribution();
    let reformulated = efr_reformulated(&pool, &cfg, &[0.0], 1.0)?.value;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let e_naive = rel(naive, EQUIVALENCE_TARGET);
    let e_ref = rel(reformulated, EQUIVALENCE_TARGET);
    let e_pair = rel(naive, reformulated);
    Ok(CheckResult {
        name: "efr-equivalence",
        passed: e_naive < 0.02 && e_ref < 0.02 && e_pair < 0.02,
        detail: format!(
            "naive={naive:.6} reformulated={reformulated:.6} closed_form={EQUIVALENCE_TARGET} \
             rel_err_naive={e_naive:.4} rel_err_reformulated={e_ref:.4} rel_gap={e_pair:.4} (tol 0.02)"
        ),
    })
}

/// Random pool of `n` points in `[-2, 2]^d` with rewards in `[-1, 1]`.
pub fn random_pool(rng: &mut StreamRng, n: usize, d: usize) -> CliResult<AnnotatedSamples> {
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(AnnotatedSamples::new(&points, &rewards)?)
}

/// Five-point central difference of `f` at `x`; truncation error is
/// `O(h^4)`, so `h` can stay large enough to keep rounding noise small.
pub fn five_point(f: impl Fn(&[f64]) -> CliResult<f64>, x: &[f64], h: f64) -> CliResult<Vec<f64>> {
    (0..x.len())
        .map(|i| {
            let at = |k: f64| {
                let mut y = x.to_vec();
                y[i] += k * h;
                f(&y)
            };
            Ok((at(-2.0)? - 8.0 * at(-1.0)? + 8.0 * at(1.0)? - at(2.0)?) / (12.0 * h))
        })
        .collect()
}

/// Relative-error denominators never drop below this; smaller gradients are
/// at the rounding floor of the difference quotient and compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-6;

pub fn gradient_check(opts: &VerifyOptions) -> CliResult<CheckResult> {
    let mut rng = stream_rng(opts.seed, 2);
    let mut worst: f64 = 0.0;
    let cases = 100;
    for case in 0..cases {
        let n = rng.random_range(1..=10);
        let d = [1, 2, 5][case % 3];
        let pool = random_pool(&mut rng, n, d)?;
        let cfg = GuidanceConfig::new(opts.lambda, 1.0, n)?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma = rng.random_range(0.3..3.0);
        let mut g = lidar_gradient(&pool, &cfg, &x, sigma)?;
        if opts.corrupt_gradient {
            g.iter_mut().for_each(|v| *v = -*v);
        }
        let fd = five_point(
            |y| Ok(efr_reformulated(&pool, &cfg, y, sigma)?.value),
            &x,
            1e-3 * sigma,
        )?;
        let scale = fd
            .iter()
            .chain(&g)
            .map(|v| v.abs())
            .fold(GRADIENT_FLOOR, f64::max);
        let err = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: "gradient-check",
        passed: worst < 1e-5,
        detail: format!(
            "max_rel_err={worst:.3e} over {cases} configs, lambda={} (tol 1e-5)",
            opts.lambda
        ),
    })
}

pub fn simplex_and_translation(opts: &VerifyOptions) -> CliResult<CheckResult> {
    let mut rng = stream_rng(opts.seed, 3);
    let (mut worst_sum, mut worst_weight, mut worst_grad): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut negative = false;
    let cases = 1000;
    for case in 0..cases {
        let n = rng.random_range(1..=20);
        let d = [1, 2, 5][case % 3];
        let pool = random_pool(&mut rng, n, d)?;
        let cfg = GuidanceConfig::new(opts.lambda, 1.0, n)?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma = rng.random_range(0.05..3.0);
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let moved_points: Vec<Vec<f64>> = pool
            .points()
            .map(|p| p.iter().zip(&shift).map(|(a, c)| a + c).collect())
            .collect();
        let moved = AnnotatedSamples::new(&moved_points, pool.rewards())?;
        let moved_x: Vec<f64> = x.iter().zip(&shift).map(|(a, c)| a + c).collect();
        for with_reward in [false, true] {
            let w = softmax_weights(&pool, &cfg, &x, sigma, with_reward)?;
            let w2 = softmax_weights(&moved, &cfg, &moved_x, sigma, with_reward)?;
            negative |= w.iter().any(|v| !(0.0..=1.0).contains(v));
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            worst_weight = worst_weight.max(
                w.iter()
                    .zip(&w2)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
        }
        let g = lidar_gradient(&pool, &cfg, &x, sigma)?;
        let g2 = lidar_gradient(&moved, &cfg, &moved_x, sigma)?;
        worst_grad = worst_grad.max(
            g.iter()
                .zip(&g2)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(CheckResult {
        name: "simplex-translation",
        passed: !negative && worst_sum < 1e-12 && worst_weight < 1e-10 && worst_grad < 1e-10,
        detail: format!(
            "max_sum_err={worst_sum:.2e} (tol 1e-12) max_weight_shift={worst_weight:.2e} \
             max_grad_shift={worst_grad:.2e} (tol 1e-10) over {cases} cases"
        ),
    })
}

pub fn run_all(opts: &VerifyOptions) -> CliResult<Vec<CheckResult>> {
    Ok(vec![
        efr_equivalence(opts.seed)?,
        gradient_check(opts)?,
        simplex_and_translation(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(lambda: f64, corrupt_gradient: bool) -> VerifyOptions {
        VerifyOptions {
            lambda,
            seed: 11,
            corrupt_gradient,
        }
    }

    #[test]
    fn default_checks_pass() {
        let checks = run_all(&opts(10.0, false)).unwrap();
        assert_eq!(checks.len(), 3);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        assert!(checks[0].line().starts_with("PASS efr-equivalence:"));
    }

    #[test]
    fn sign_flip_is_caught() {
        let check = gradient_check(&opts(10.0, true)).unwrap();
        assert!(!check.passed);
        assert!(check.line().starts_with("FAIL"));
    }

    #[test]
    fn zero_lambda_gradient_is_exactly_zero() {
        let check = gradient_check(&opts(0.0, false)).unwrap();
        assert!(check.passed);
        assert!(
            check.detail.contains("max_rel_err=0.000e0"),
            "{}",
            check.detail
        );
    }
}
