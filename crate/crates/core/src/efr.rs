//! Expected-future-reward (EFR) estimators and the closed-form guidance.
//!
//! The EFR at a noisy state is `log E[exp(lambda r(x_0)) | x_t]`. Four
//! estimators are provided:
//!
//! - nested Monte Carlo: simulate the reverse process from `x_t` many times;
//! - Taylor/Tweedie: `lambda * r(E[x_0 | x_t])`;
//! - the marginal-sample form: reweight *unconditional* final samples by the
//!   forward kernel `N(x_t; x_0, sigma^2 I)`, which removes every model call
//!   from the dependence on `x_t`;
//! - the same form over a lookahead pool produced by a cheap solver.
//!
//! The last two share one implementation, and its gradient in `x_t` has the
//! closed form `sum_i (w_r_i - w_i) x0_i / sigma^2`, with `w_r` and `w` two
//! softmaxes over the pool (with and without the reward logits).

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::analytic_models::{GaussianMixture, Reward};
use crate::error::{Error, Result};
use crate::samplers::{reverse_step, StepRule};
use crate::schedule::{make_grid_from, GridKind, NoiseSchedule};
use crate::vecops::{log_sum_exp, sq_dist};

/// Reward tilt `lambda`, guidance weight `s` and pool size `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub s: f64,
    pub n: usize,
}

impl GuidanceConfig {
    pub fn new(lambda: f64, s: f64, n: usize) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Argument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Argument(format!(
                "guidance weight s must be >= 0, got {s}"
            )));
        }
        if n == 0 {
            return Err(Error::Argument("pool size n must be >= 1".into()));
        }
        Ok(Self { lambda, s, n })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            s: 1.0,
            n: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    NaiveMc,
    Taylor,
    ReformulatedMc,
    EmpiricalLookahead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfrEstimate {
    pub value: f64,
    pub estimator: Estimator,
    pub samples_used: usize,
}

/// Where the samples of an [`AnnotatedSamples`] set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    /// Exact draws from the data distribution.
    Exact,
    /// Output of a lookahead solver.
    Lookahead,
}

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(0);

/// Reward-annotated final samples in a flat row-major layout.
#[derive(Debug, Clone)]
pub struct AnnotatedSamples {
    /// Identifies the sample set for workspace caches; clones share it.
    id: u64,
    dim: usize,
    points: Vec<f64>,
    rewards: Vec<f64>,
    max_reward: f64,
    source: SampleSource,
}

impl PartialEq for AnnotatedSamples {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.points == other.points
            && self.rewards == other.rewards
            && self.source == other.source
    }
}

impl AnnotatedSamples {
    pub fn new(samples: &[Vec<f64>], rewards: &[f64]) -> Result<Self> {
        let dim = samples.first().map(Vec::len).unwrap_or(0);
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Argument("pool samples disagree on dimension".into()));
        }
        Self::from_flat(dim, samples.concat(), rewards.to_vec())
    }

    pub fn from_flat(dim: usize, points: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Argument(
                "pool must contain at least one sample".into(),
            ));
        }
        if dim == 0 || points.len() != dim * rewards.len() {
            return Err(Error::Argument(format!(
                "pool has {} coordinates for {} samples of dimension {dim}",
                points.len(),
                rewards.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) || points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument("pool entries must be finite".into()));
        }
        let max_reward = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
            dim,
            points,
            rewards,
            max_reward,
            source: SampleSource::Lookahead,
        })
    }

    /// Marks the samples as exact draws from the data distribution.
    pub fn from_exact_distribution(mut self) -> Self {
        self.source = SampleSource::Exact;
        self
    }

    pub fn source(&self) -> SampleSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// The `k` lowest-reward samples (ties keep pool order); reference sets
    /// for the repulsion baselines.
    pub fn lowest_reward(&self, k: usize) -> Vec<Vec<f64>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.rewards[a].total_cmp(&self.rewards[b]).then(a.cmp(&b)));
        idx.into_iter()
            .take(k)
            .map(|i| self.point(i).to_vec())
            .collect()
    }

    fn check_query(&self, x_t: &[f64], sigma_t: f64) -> Result<()> {
        if x_t.len() != self.dim {
            return Err(Error::Argument(format!(
                "state has dimension {}, pool has {}",
                x_t.len(),
                self.dim
            )));
        }
        if !(sigma_t > 0.0 && sigma_t.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_t must be positive, got {sigma_t}"
            )));
        }
        Ok(())
    }

    /// Fills `ws` with the kernel logits `-||x_t - x0_j||^2 / (2 sigma^2)` and
    /// the reward-tilted logits (rewards shifted by their maximum, so that
    /// equal rewards give bit-identical logit vectors).
    fn logits(&self, lambda: f64, x_t: &[f64], sigma_t: f64, ws: &mut Workspace) {
        let inv = 1.0 / (2.0 * sigma_t * sigma_t);
        ws.kernel.clear();
        ws.tilted.clear();
        for (j, p) in self.points.chunks_exact(self.dim).enumerate() {
            let a = -sq_dist(x_t, p) * inv;
            ws.kernel.push(a);
            ws.tilted
                .push(a + lambda * (self.rewards[j] - self.max_reward));
        }
    }

    /// Allocation-free guidance gradient for the sampling loop. `x_t` and
    /// `out` must have the pool's dimension and `sigma_t` must be positive.
    ///
    /// The tilted weights are computed as kernel weights times the cached
    /// factors `exp(lambda (r_i - r_max))`, one `exp` per sample instead of
    /// two. If those products underflow the two-softmax path takes over.
    pub fn gradient_into(
        &self,
        lambda: f64,
        x_t: &[f64],
        sigma_t: f64,
        out: &mut [f64],
        ws: &mut Workspace,
    ) {
        let key = (self.id, lambda.to_bits());
        if ws.factor_key != Some(key) {
            ws.factors.clear();
            ws.factors.extend(
                self.rewards
                    .iter()
                    .map(|r| (lambda * (r - self.max_reward)).exp()),
            );
            ws.factor_key = Some(key);
        }
        let inv = 1.0 / (2.0 * sigma_t * sigma_t);
        ws.kernel.clear();
        let mut amax = f64::NEG_INFINITY;
        for p in self.points.chunks_exact(self.dim) {
            let a = -sq_dist(x_t, p) * inv;
            amax = amax.max(a);
            ws.kernel.push(a);
        }
        ws.acc_kernel.clear();
        ws.acc_kernel.resize(self.dim, 0.0);
        ws.acc_tilted.clear();
        ws.acc_tilted.resize(self.dim, 0.0);
        let (mut sum_k, mut sum_t) = (0.0, 0.0);
        for (j, p) in self.points.chunks_exact(self.dim).enumerate() {
            let e = ws.kernel[j] - amax;
            // exp underflows to zero below about -745.
            if e < -745.0 {
                continue;
            }
            let u = e.exp();
            let v = u * ws.factors[j];
            sum_k += u;
            sum_t += v;
            // Centred at x_t: the weight differences sum to zero, and this
            // form is exactly translation invariant in floating point too.
            for ((ak, at), (pi, xi)) in ws
                .acc_kernel
                .iter_mut()
                .zip(ws.acc_tilted.iter_mut())
                .zip(p.iter().zip(x_t))
            {
                let c = pi - xi;
                *ak += u * c;
                *at += v * c;
            }
        }
        if sum_t < 1e-250 {
            return self.gradient_two_softmax(lambda, x_t, sigma_t, out, ws);
        }
        let scale = 1.0 / (sigma_t * sigma_t);
        for ((o, ak), at) in out.iter_mut().zip(&ws.acc_kernel).zip(&ws.acc_tilted) {
            *o = (at / sum_t - ak / sum_k) * scale;
        }
    }

    fn gradient_two_softmax(
        &self,
        lambda: f64,
        x_t: &[f64],
        sigma_t: f64,
        out: &mut [f64],
        ws: &mut Workspace,
    ) {
        self.logits(lambda, x_t, sigma_t, ws);
        crate::vecops::softmax_in_place(&mut ws.kernel);
        crate::vecops::softmax_in_place(&mut ws.tilted);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, p) in self.points.chunks_exact(self.dim).enumerate() {
            let dw = ws.tilted[j] - ws.kernel[j];
            if dw == 0.0 {
                continue;
            }
            for (o, (pi, xi)) in out.iter_mut().zip(p.iter().zip(x_t)) {
                *o += dw * (pi - xi);
            }
        }
        let inv = 1.0 / (sigma_t * sigma_t);
        out.iter_mut().for_each(|o| *o *= inv);
    }
}

/// Scratch buffers reused across guidance evaluations, including the reward
/// factors of the last pool and `lambda` seen.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    kernel: Vec<f64>,
    tilted: Vec<f64>,
    factors: Vec<f64>,
    factor_key: Option<(u64, u64)>,
    acc_kernel: Vec<f64>,
    acc_tilted: Vec<f64>,
}

/// The reward-tilted (`with_reward`) or plain kernel softmax over the pool.
pub fn softmax_weights(
    pool: &AnnotatedSamples,
    cfg: &GuidanceConfig,
    x_t: &[f64],
    sigma_t: f64,
    with_reward: bool,
) -> Result<Vec<f64>> {
    pool.check_query(x_t, sigma_t)?;
    let mut ws = Workspace::default();
    pool.logits(cfg.lambda, x_t, sigma_t, &mut ws);
    let mut w = if with_reward { ws.tilted } else { ws.kernel };
    crate::vecops::softmax_in_place(&mut w);
    Ok(w)
}

/// Marginal-sample EFR:
/// `logsumexp_i(lambda r_i - d_i) - logsumexp_j(-d_j)` with
/// `d_i = ||x_t - x0_i||^2 / (2 sigma_t^2)`.
pub fn efr_reformulated(
    pool: &AnnotatedSamples,
    cfg: &GuidanceConfig,
    x_t: &[f64],
    sigma_t: f64,
) -> Result<EfrEstimate> {
    pool.check_query(x_t, sigma_t)?;
    let mut ws = Workspace::default();
    pool.logits(cfg.lambda, x_t, sigma_t, &mut ws);
    let kmax = ws.kernel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ws.kernel.iter_mut().for_each(|a| *a -= kmax);
    ws.tilted.iter_mut().for_each(|a| *a -= kmax);
    let shift = if cfg.lambda == 0.0 {
        0.0
    } else {
        cfg.lambda * pool.max_reward
    };
    let value = shift + (log_sum_exp(&ws.tilted) - log_sum_exp(&ws.kernel));
    Ok(EfrEstimate {
        value,
        estimator: match pool.source {
            SampleSource::Exact => Estimator::ReformulatedMc,
            SampleSource::Lookahead => Estimator::EmpiricalLookahead,
        },
        samples_used: pool.len(),
    })
}

/// Closed-form gradient of [`efr_reformulated`] with respect to `x_t`.
pub fn lidar_gradient(
    pool: &AnnotatedSamples,
    cfg: &GuidanceConfig,
    x_t: &[f64],
    sigma_t: f64,
) -> Result<Vec<f64>> {
    pool.check_query(x_t, sigma_t)?;
    let mut out = vec![0.0; pool.dim];
    pool.gradient_into(
        cfg.lambda,
        x_t,
        sigma_t,
        &mut out,
        &mut Workspace::default(),
    );
    Ok(out)
}

/// Taylor/Tweedie approximation `lambda * r(E[x_0 | x_t])`.
pub fn efr_taylor(
    model: &GaussianMixture,
    reward: &Reward,
    cfg: &GuidanceConfig,
    x_t: &[f64],
    sigma_t: f64,
) -> Result<EfrEstimate> {
    if !(sigma_t > 0.0) {
        return Err(Error::Domain(format!(
            "sigma_t must be positive, got {sigma_t}"
        )));
    }
    let value = if cfg.lambda == 0.0 {
        0.0
    } else {
        cfg.lambda * reward.eval(&model.tweedie_mean(x_t, sigma_t))
    };
    Ok(EfrEstimate {
        value,
        estimator: Estimator::Taylor,
        samples_used: 1,
    })
}

/// How nested Monte Carlo draws `x_0 ~ p(x_0 | x_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerSolver {
    /// Euler-Maruyama reverse-SDE simulation from `(x_t, t)` down to `t = 0`.
    ReverseSde {
        steps: usize,
        grid: GridKind,
        rule: StepRule,
    },
    /// Stochastic Heun: an Euler-Maruyama predictor, then the average of the
    /// scores at both ends with the same noise draw. Two score evaluations
    /// per step.
    ReverseHeun { steps: usize, grid: GridKind },
    /// Exact draws from the Gaussian-mixture posterior.
    ExactPosterior,
}

impl Default for InnerSolver {
    fn default() -> Self {
        InnerSolver::ReverseHeun {
            steps: 64,
            grid: GridKind::SigmaUniform,
        }
    }
}

/// Draws one posterior sample with the chosen inner solver.
pub fn sample_posterior<R: Rng + ?Sized>(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    inner: &InnerSolver,
    x_t: &[f64],
    t: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match *inner {
        InnerSolver::ExactPosterior => Ok(model.sample_posterior(x_t, schedule.sigma_at(t)?, rng)),
        InnerSolver::ReverseSde { steps, grid, rule } => {
            let grid = make_grid_from(schedule, t, steps, grid)?;
            let mut x = x_t.to_vec();
            let mut score = vec![0.0; x.len()];
            for (hi, lo) in grid.intervals() {
                model.perturbed_score_into(&x, schedule.sigma_at(hi)?, &mut score);
                let inc = rule.increment(schedule, hi, lo)?;
                reverse_step(&mut x, &score, inc, true, || {
                    rng.sample(rand_distr::StandardNormal)
                });
            }
            Ok(x)
        }
        InnerSolver::ReverseHeun { steps, grid } => {
            let grid = make_grid_from(schedule, t, steps, grid)?;
            let mut x = x_t.to_vec();
            let mut score = vec![0.0; x.len()];
            let mut predicted = vec![0.0; x.len()];
            let mut score_lo = vec![0.0; x.len()];
            let mut noise = vec![0.0; x.len()];
            for (hi, lo) in grid.intervals() {
                let inc = schedule.variance_increment(hi, lo)?;
                let root = inc.sqrt();
                model.perturbed_score_into(&x, schedule.sigma_at(hi)?, &mut score);
                for ((p, (&xi, &si)), z) in predicted
                    .iter_mut()
                    .zip(x.iter().zip(&score))
                    .zip(noise.iter_mut())
                {
                    *z = rng.sample(rand_distr::StandardNormal);
                    *p = xi + inc * si + root * *z;
                }
                model.perturbed_score_into(&predicted, schedule.sigma_at(lo)?, &mut score_lo);
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi += 0.5 * inc * (score[i] + score_lo[i]) + root * noise[i];
                }
            }
            Ok(x)
        }
    }
}

/// Nested Monte Carlo EFR `log((1/n) sum_i exp(lambda r(x0_i)))` with
/// `x0_i ~ p(x_0 | x_t)`.
#[allow(clippy::too_many_arguments)]
pub fn efr_naive_mc<R: Rng + ?Sized>(
    model: &GaussianMixture,
    reward: &Reward,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    inner: &InnerSolver,
    x_t: &[f64],
    t: f64,
    n_inner: usize,
    rng: &mut R,
) -> Result<EfrEstimate> {
    if n_inner == 0 {
        return Err(Error::Argument("n_inner must be >= 1".into()));
    }
    let mut terms = Vec::with_capacity(n_inner);
    for _ in 0..n_inner {
        let x0 = sample_posterior(model, schedule, inner, x_t, t, rng)?;
        terms.push(cfg.lambda * reward.eval(&x0));
    }
    let value = if cfg.lambda == 0.0 {
        0.0
    } else {
        log_sum_exp(&terms) - (n_inner as f64).ln()
    };
    Ok(EfrEstimate {
        value,
        estimator: Estimator::NaiveMc,
        samples_used: n_inner,
    })
}
