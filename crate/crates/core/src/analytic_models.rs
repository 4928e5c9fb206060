//! Analytic data distributions and rewards.
//!
//! A diagonal-covariance Gaussian mixture stays a Gaussian mixture under the
//! variance-exploding forward kernel (every component variance grows by
//! `sigma^2`), which gives exact perturbed scores, exact Tweedie means and an
//! exact posterior `p(x_0 | x_t)`. Tilting by `exp(lambda * a^T x)` also keeps
//! the family closed, so linear rewards have an exact tilted oracle; other
//! rewards fall back to grid quadrature in one or two dimensions.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::vecops::{dist, dot, log_sum_exp};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Argument(
                "mixture needs at least one component".into(),
            ));
        }
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::Argument(format!(
                "mixture has {} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Argument(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Argument("mixture dimension must be positive".into()));
        }
        if means.iter().any(|m| m.len() != d) || variances.iter().any(|v| v.len() != d) {
            return Err(Error::Argument(
                "mixture components disagree on dimension".into(),
            ));
        }
        if variances
            .iter()
            .flatten()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Argument(
                "mixture variances must be strictly positive".into(),
            ));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::Argument("mixture means must be finite".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            means,
            variances,
            log_weights,
        })
    }

    /// A single Gaussian `N(mean, diag(variance))`.
    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], vec![1.0; dim]).expect("valid standard normal")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    fn component_log_density(&self, k: usize, x: &[f64], sigma2: f64) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let v = vi + sigma2;
            let r = xi - mi;
            acc -= 0.5 * (LN_2PI + v.ln() + r * r / v);
        }
        acc
    }

    fn max_log_joint(&self, x: &[f64], sigma2: f64) -> f64 {
        (0..self.components())
            .map(|k| self.log_weights[k] + self.component_log_density(k, x, sigma2))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `log p_sigma(x)` of the mixture convolved with `N(0, sigma^2 I)`.
    /// `sigma = 0` gives the data density.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.log_weights[k] + self.component_log_density(k, x, s2))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, x: &[f64], sigma: f64) -> f64 {
        self.log_density(x, sigma).exp()
    }

    /// Posterior component probabilities given `x` at noise level `sigma`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let mut lw: Vec<f64> = (0..self.components())
            .map(|k| self.log_weights[k] + self.component_log_density(k, x, s2))
            .collect();
        crate::vecops::softmax_in_place(&mut lw);
        lw
    }

    /// Exact Stein score `grad_x log p_sigma(x)`.
    pub fn perturbed_score(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.perturbed_score_into(x, sigma, &mut out);
        out
    }

    /// Allocation-free [`perturbed_score`](Self::perturbed_score).
    pub fn perturbed_score_into(&self, x: &[f64], sigma: f64, out: &mut [f64]) {
        let s2 = sigma * sigma;
        let m = self.max_log_joint(x, s2);
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut total = 0.0;
        for k in 0..self.components() {
            let w = (self.log_weights[k] + self.component_log_density(k, x, s2) - m).exp();
            if w == 0.0 {
                continue;
            }
            total += w;
            for (i, o) in out.iter_mut().enumerate() {
                *o -= w * (x[i] - self.means[k][i]) / (self.variances[k][i] + s2);
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    /// Tweedie posterior mean `E[x_0 | x_t = x] = x + sigma^2 * score`.
    pub fn tweedie_mean(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        self.perturbed_score(x, sigma)
            .iter()
            .zip(x)
            .map(|(s, xi)| xi + s2 * s)
            .collect()
    }

    /// Hessian of `log p_sigma` at `x`, row-major `d x d`.
    ///
    /// `H = sum_k g_k (-D_k^{-1} + s_k s_k^T) - s s^T` with component scores
    /// `s_k`, responsibilities `g_k` and mixture score `s`.
    pub fn score_hessian(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim();
        let s2 = sigma * sigma;
        let resp = self.responsibilities(x, sigma);
        let mut h = vec![0.0; d * d];
        let mut score = vec![0.0; d];
        let mut sk = vec![0.0; d];
        for (k, &g) in resp.iter().enumerate() {
            for i in 0..d {
                let v = self.variances[k][i] + s2;
                sk[i] = -(x[i] - self.means[k][i]) / v;
                score[i] += g * sk[i];
                h[i * d + i] -= g / v;
            }
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += g * sk[i] * sk[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] -= score[i] * score[j];
            }
        }
        h
    }

    fn pick_component<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// One exact draw from the data distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = Self::pick_component(&self.weights, rng);
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect()
    }

    /// One exact draw from the denoising posterior `p(x_0 | x_t = x)`.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        sigma: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let s2 = sigma * sigma;
        let resp = self.responsibilities(x, sigma);
        let k = Self::pick_component(&resp, rng);
        (0..self.dim())
            .map(|i| {
                let v = self.variances[k][i];
                let mean = (s2 * self.means[k][i] + v * x[i]) / (v + s2);
                let var = v * s2 / (v + s2);
                let z: f64 = rng.sample(StandardNormal);
                mean + var.sqrt() * z
            })
            .collect()
    }

    /// Marginal of coordinate `coord` as a 1-D mixture.
    pub fn marginal(&self, coord: usize) -> Result<Self> {
        if coord >= self.dim() {
            return Err(Error::Argument(format!(
                "coordinate {coord} out of range for dimension {}",
                self.dim()
            )));
        }
        Self::new(
            self.weights.clone(),
            self.means.iter().map(|m| vec![m[coord]]).collect(),
            self.variances.iter().map(|v| vec![v[coord]]).collect(),
        )
    }

    /// Per-axis window covering `width` component standard deviations on
    /// both sides of every component.
    pub fn support_window(&self, width: f64) -> Vec<(f64, f64)> {
        (0..self.dim())
            .map(|i| {
                let lo = (0..self.components())
                    .map(|k| self.means[k][i] - width * self.variances[k][i].sqrt())
                    .fold(f64::INFINITY, f64::min);
                let hi = (0..self.components())
                    .map(|k| self.means[k][i] + width * self.variances[k][i].sqrt())
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect()
    }
}

/// Reward family.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `a^T x`
    Linear { a: Vec<f64> },
    /// `-min_k ||x - c_k||`
    NegDist { centers: Vec<Vec<f64>> },
    /// `-x^T diag(a) x + b^T x`
    Quadratic { a: Vec<f64>, b: Vec<f64> },
}

/// Known reward range, carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reward {
    pub kind: RewardKind,
    pub bounds: Option<RewardBounds>,
}

impl Reward {
    pub fn linear(a: Vec<f64>) -> Self {
        Self {
            kind: RewardKind::Linear { a },
            bounds: None,
        }
    }

    pub fn neg_dist(centers: Vec<Vec<f64>>) -> Self {
        Self {
            kind: RewardKind::NegDist { centers },
            bounds: None,
        }
    }

    pub fn quadratic(a: Vec<f64>, b: Vec<f64>) -> Self {
        Self {
            kind: RewardKind::Quadratic { a, b },
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, min: f64, max: f64) -> Self {
        self.bounds = Some(RewardBounds { min, max });
        self
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, RewardKind::Linear { .. })
    }

    /// Input dimension the reward was declared for.
    pub fn dim(&self) -> Option<usize> {
        match &self.kind {
            RewardKind::Linear { a } => Some(a.len()),
            RewardKind::NegDist { centers } => centers.first().map(Vec::len),
            RewardKind::Quadratic { a, .. } => Some(a.len()),
        }
    }

    /// Checks the reward's parameters against the data dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = match &self.kind {
            RewardKind::Linear { a } => a.len() == dim,
            RewardKind::NegDist { centers } => {
                !centers.is_empty() && centers.iter().all(|c| c.len() == dim)
            }
            RewardKind::Quadratic { a, b } => a.len() == dim && b.len() == dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "reward parameters do not match dimension {dim}"
            )))
        }
    }

    fn nearest_center<'a>(centers: &'a [Vec<f64>], x: &[f64]) -> (&'a [f64], f64) {
        centers.iter().map(|c| (c.as_slice(), dist(x, c))).fold(
            (centers[0].as_slice(), f64::INFINITY),
            |best, cur| {
                if cur.1 < best.1 {
                    cur
                } else {
                    best
                }
            },
        )
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            RewardKind::Linear { a } => dot(a, x),
            RewardKind::NegDist { centers } => -Self::nearest_center(centers, x).1,
            RewardKind::Quadratic { a, b } => x
                .iter()
                .zip(a)
                .zip(b)
                .map(|((xi, ai), bi)| -ai * xi * xi + bi * xi)
                .sum(),
        }
    }

    /// `grad_x r(x)`. For `NegDist` the gradient at a center is taken as zero.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            RewardKind::Linear { a } => a.clone(),
            RewardKind::NegDist { centers } => {
                let (c, d) = Self::nearest_center(centers, x);
                if d == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    x.iter().zip(c).map(|(xi, ci)| -(xi - ci) / d).collect()
                }
            }
            RewardKind::Quadratic { a, b } => x
                .iter()
                .zip(a)
                .zip(b)
                .map(|((xi, ai), bi)| -2.0 * ai * xi + bi)
                .collect(),
        }
    }
}

/// Exact tilt of a mixture by `exp(lambda * a^T x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedOracle {
    pub base: GaussianMixture,
    pub reward: Reward,
    pub lambda: f64,
    pub tilted: GaussianMixture,
}

/// Tilts every component: mean `mu_k + lambda * Sigma_k a`, unnormalized
/// weight `pi_k exp(lambda a^T mu_k + lambda^2 a^T Sigma_k a / 2)`.
pub fn exact_tilted(model: &GaussianMixture, reward: &Reward, lambda: f64) -> Result<TiltedOracle> {
    let RewardKind::Linear { a } = &reward.kind else {
        return Err(Error::UnsupportedReward(
            "exact tilting needs a linear reward; use quadrature_tilted_density".into(),
        ));
    };
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    reward.validate(model.dim())?;
    let mut log_w = Vec::with_capacity(model.components());
    let mut means = Vec::with_capacity(model.components());
    for k in 0..model.components() {
        let v = &model.variances()[k];
        let mu = &model.means()[k];
        let quad: f64 = a.iter().zip(v).map(|(ai, vi)| ai * ai * vi).sum();
        log_w.push(model.weights()[k].ln() + lambda * dot(a, mu) + 0.5 * lambda * lambda * quad);
        means.push(
            mu.iter()
                .zip(v)
                .zip(a)
                .map(|((m, vi), ai)| m + lambda * vi * ai)
                .collect(),
        );
    }
    crate::vecops::softmax_in_place(&mut log_w);
    // Renormalize so the sum-to-one check holds to the last ulp.
    let total: f64 = log_w.iter().sum();
    log_w.iter_mut().for_each(|w| *w /= total);
    let tilted = GaussianMixture::new(log_w, means, model.variances().to_vec())?;
    Ok(TiltedOracle {
        base: model.clone(),
        reward: reward.clone(),
        lambda,
        tilted,
    })
}

/// Grid-quadrature oracle for `p(x) exp(lambda r(x)) / Z` in one or two
/// dimensions, for rewards without a closed-form tilt.
#[derive(Debug, Clone)]
pub struct QuadratureTilted {
    model: GaussianMixture,
    reward: Reward,
    lambda: f64,
    window: Vec<(f64, f64)>,
    log_z: f64,
}

/// Quadrature resolution and coverage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    /// Trapezoid nodes per axis.
    pub points_per_axis: usize,
    /// Half-width of the window in base component standard deviations (>= 8).
    pub width_sd: f64,
}

impl QuadratureConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            points_per_axis: if dim == 1 { 8001 } else { 601 },
            width_sd: 10.0,
        }
    }
}

fn trapezoid_weight(i: usize, n: usize, h: f64) -> f64 {
    if i == 0 || i + 1 == n {
        0.5 * h
    } else {
        h
    }
}

impl QuadratureTilted {
    pub fn new(
        model: &GaussianMixture,
        reward: &Reward,
        lambda: f64,
        cfg: QuadratureConfig,
    ) -> Result<Self> {
        let d = model.dim();
        if d > 2 {
            return Err(Error::UnsupportedDimension(d));
        }
        if cfg.points_per_axis < 3 || cfg.width_sd < 8.0 {
            return Err(Error::Argument(
                "quadrature needs >= 3 nodes per axis and a window of >= 8 standard deviations"
                    .into(),
            ));
        }
        reward.validate(d)?;
        let window = model.support_window(cfg.width_sd);
        let n = cfg.points_per_axis;
        let steps: Vec<f64> = window
            .iter()
            .map(|(lo, hi)| (hi - lo) / (n - 1) as f64)
            .collect();
        let mut terms = Vec::with_capacity(n.pow(d as u32));
        let mut x = vec![0.0; d];
        let total = n.pow(d as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut log_w = 0.0;
            for axis in 0..d {
                let i = rem % n;
                rem /= n;
                x[axis] = window[axis].0 + i as f64 * steps[axis];
                log_w += trapezoid_weight(i, n, steps[axis]).ln();
            }
            terms.push(log_w + model.log_density(&x, 0.0) + lambda * reward.eval(&x));
        }
        let log_z = log_sum_exp(&terms);
        Ok(Self {
            model: model.clone(),
            reward: reward.clone(),
            lambda,
            window,
            log_z,
        })
    }

    pub fn window(&self) -> &[(f64, f64)] {
        &self.window
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        (self.model.log_density(x, 0.0) + self.lambda * self.reward.eval(x) - self.log_z).exp()
    }
}

/// One-shot form of [`QuadratureTilted::density`] with the default grid.
pub fn quadrature_tilted_density(
    model: &GaussianMixture,
    reward: &Reward,
    lambda: f64,
    x: &[f64],
) -> Result<f64> {
    let q = QuadratureTilted::new(
        model,
        reward,
        lambda,
        QuadratureConfig::for_dim(model.dim()),
    )?;
    Ok(q.density(x))
}

/// Standard normal density, used by oracles and tests.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bimodal() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.5], vec![2.0]],
            vec![vec![0.4], vec![0.9]],
        )
        .unwrap()
    }

    fn random_mixture(rng: &mut ChaCha8Rng, d: usize, k: usize) -> GaussianMixture {
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let total: f64 = w.iter().sum();
        w[0] += 1.0 - total;
        let means = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let vars = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(0.2..2.0)).collect())
            .collect();
        GaussianMixture::new(w, means, vars).unwrap()
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(
            GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err()
        );
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn score_vanishes_at_the_mode_of_a_standard_normal() {
        let m = GaussianMixture::standard_normal(1);
        assert_eq!(m.perturbed_score(&[0.0], 1.0), vec![0.0]);
    }

    #[test]
    fn single_gaussian_score_identity() {
        let m = GaussianMixture::gaussian(vec![1.5, -0.5], vec![0.7, 2.0]).unwrap();
        for sigma in [0.01, 0.3, 1.0, 7.0] {
            let x = [0.2, 3.0];
            let s = m.perturbed_score(&x, sigma);
            assert!((s[0] + (0.2 - 1.5) / (0.7 + sigma * sigma)).abs() < 1e-14);
            assert!((s[1] + (3.0 + 0.5) / (2.0 + sigma * sigma)).abs() < 1e-14);
        }
    }

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut q = x.to_vec();
                p[i] += h;
                q[i] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_matches_finite_differences_of_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let d = if case < 100 { 1 } else { 2 };
            let m = random_mixture(&mut rng, d, 2);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            let sigma: f64 = rng.random_range(0.05..5.0);
            let s = m.perturbed_score(&x, sigma);
            let fd = fd_gradient(|y| m.log_density(y, sigma), &x, 1e-5);
            let scale = s.iter().map(|v| v.abs()).fold(1e-3, f64::max);
            for (a, b) in s.iter().zip(&fd) {
                assert!((a - b).abs() / scale < 1e-4, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let m = random_mixture(&mut rng, 2, 3);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sigma: f64 = rng.random_range(0.1..3.0);
            let h = m.score_hessian(&x, sigma);
            for j in 0..2 {
                let col = fd_gradient(|y| m.perturbed_score(y, sigma)[j], &x, 1e-5);
                for i in 0..2 {
                    let scale = h.iter().map(|v| v.abs()).fold(1e-3, f64::max);
                    assert!((h[j * 2 + i] - col[i]).abs() / scale < 1e-5);
                }
            }
        }
    }

    #[test]
    fn tweedie_mean_of_unit_gaussian() {
        let m = GaussianMixture::standard_normal(1);
        let mean = m.tweedie_mean(&[2.0], 1.0);
        assert!((mean[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tweedie_mean_collapses_at_small_sigma() {
        let m = bimodal();
        for x in [-2.0, -1.0, 0.5, 2.5] {
            let sigma = 0.01;
            let score = m.perturbed_score(&[x], sigma);
            let mean = m.tweedie_mean(&[x], sigma);
            assert!((mean[0] - x).abs() <= sigma * sigma * score[0].abs() + 1e-15);
        }
    }

    #[test]
    fn tweedie_mean_is_fixed_at_a_symmetric_midpoint() {
        let m = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            vec![vec![0.5]; 2],
        )
        .unwrap();
        for sigma in [0.1, 1.0, 5.0] {
            assert!(m.tweedie_mean(&[0.0], sigma)[0].abs() < 1e-15);
        }
    }

    #[test]
    fn tweedie_mean_matches_monte_carlo_posterior() {
        // Importance sampling from the prior with kernel weights.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for cfg in 0..10 {
            let m = random_mixture(&mut rng, 1, 2);
            let sigma: f64 = rng.random_range(0.3..2.0);
            let x0 = m.sample(&mut rng);
            let xt = x0[0] + sigma * rng.sample::<f64, _>(StandardNormal);
            let draws = 1_000_000;
            let mut draw_rng = stream_rng(99, cfg);
            let (mut sw, mut swx, mut swx2) = (0.0, 0.0, 0.0);
            let mut sw2 = 0.0;
            for _ in 0..draws {
                let s = m.sample(&mut draw_rng)[0];
                let w = (-(xt - s) * (xt - s) / (2.0 * sigma * sigma)).exp();
                sw += w;
                sw2 += w * w;
                swx += w * s;
                swx2 += w * s * s;
            }
            let mean = swx / sw;
            let var = swx2 / sw - mean * mean;
            let ess = sw * sw / sw2;
            let se = (var / ess).sqrt();
            let exact = m.tweedie_mean(&[xt], sigma)[0];
            assert!(
                (mean - exact).abs() < 3.0 * se,
                "cfg {cfg}: {mean} vs {exact} (se {se})"
            );
        }
    }

    #[test]
    fn posterior_sampler_matches_tweedie_mean() {
        let m = bimodal();
        let mut rng = stream_rng(5, 0);
        let n = 200_000;
        let (x, sigma) = ([0.7], 1.3);
        let mean: f64 = (0..n)
            .map(|_| m.sample_posterior(&x, sigma, &mut rng)[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - m.tweedie_mean(&x, sigma)[0]).abs() < 0.01);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(Reward::linear(vec![1.0, 0.0]).eval(&[3.0, 7.0]), 3.0);
        assert_eq!(
            Reward::neg_dist(vec![vec![0.0, 0.0]]).eval(&[3.0, 4.0]),
            -5.0
        );
        assert_eq!(Reward::quadratic(vec![1.0], vec![0.0]).eval(&[2.0]), -4.0);
    }

    #[test]
    fn reward_gradients_match_finite_differences() {
        let rewards = [
            Reward::linear(vec![0.3, -1.2]),
            Reward::neg_dist(vec![vec![1.0, 1.0], vec![-2.0, 0.5]]),
            Reward::quadratic(vec![0.5, 2.0], vec![1.0, -1.0]),
        ];
        let x = [0.4, -0.3];
        for r in &rewards {
            let g = r.gradient(&x);
            let fd = fd_gradient(|y| r.eval(y), &x, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn tilting_a_standard_normal_by_x_gives_unit_shift() {
        let m = GaussianMixture::standard_normal(1);
        let o = exact_tilted(&m, &Reward::linear(vec![1.0]), 1.0).unwrap();
        assert!((o.tilted.means()[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(o.tilted.variances()[0][0], 1.0);
        // Independent check: normalize e^x N(x; 0, 1) by trapezoid quadrature.
        let (lo, hi, n) = (-12.0, 14.0, 26_001);
        let h = (hi - lo) / (n - 1) as f64;
        let unnorm = |x: f64| x.exp() * normal_pdf(x, 0.0, 1.0);
        let z: f64 = (0..n)
            .map(|i| trapezoid_weight(i, n, h) * unnorm(lo + i as f64 * h))
            .sum();
        let mass: f64 = (0..n)
            .map(|i| trapezoid_weight(i, n, h) * o.tilted.density(&[lo + i as f64 * h], 0.0))
            .sum();
        assert!((mass - 1.0).abs() < 1e-8);
        for x in [-2.0, 0.0, 1.0, 2.5] {
            assert!((o.tilted.density(&[x], 0.0) - unnorm(x) / z).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_lambda_tilt_is_identity() {
        let m = bimodal();
        let o = exact_tilted(&m, &Reward::linear(vec![2.0]), 0.0).unwrap();
        assert_eq!(o.tilted.means(), m.means());
        for (a, b) in o.tilted.weights().iter().zip(m.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_means_keep_weights_and_shift_together() {
        let m = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![vec![1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        let o = exact_tilted(&m, &Reward::linear(vec![0.5]), 3.0).unwrap();
        assert!((o.tilted.weights()[0] - 0.25).abs() < 1e-14);
        assert_eq!(o.tilted.means()[0], o.tilted.means()[1]);
        assert!((o.tilted.means()[0][0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn nonlinear_rewards_are_rejected_by_exact_tilt() {
        let err = exact_tilted(&bimodal(), &Reward::neg_dist(vec![vec![0.0]]), 1.0).unwrap_err();
        assert!(matches!(err, Error::UnsupportedReward(_)));
    }

    #[test]
    fn quadrature_without_tilt_is_the_base_density() {
        let m = bimodal();
        let r = Reward::neg_dist(vec![vec![1.0]]);
        for x in [-2.0, 0.0, 1.7] {
            let q = quadrature_tilted_density(&m, &r, 0.0, &[x]).unwrap();
            let p = m.density(&[x], 0.0);
            assert!((q - p).abs() / p < 1e-6);
        }
    }

    #[test]
    fn quadrature_agrees_with_exact_tilt_in_one_and_two_dimensions() {
        let m1 = bimodal();
        let r1 = Reward::linear(vec![0.8]);
        let q1 = QuadratureTilted::new(&m1, &r1, 1.5, QuadratureConfig::for_dim(1)).unwrap();
        let e1 = exact_tilted(&m1, &r1, 1.5).unwrap();
        for x in [-2.0, 0.0, 1.0, 3.0, 4.5] {
            let (a, b) = (q1.density(&[x]), e1.tilted.density(&[x], 0.0));
            assert!((a - b).abs() / b < 1e-4, "{a} vs {b}");
        }
        let m2 = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.5], vec![1.5, -0.5]],
            vec![vec![0.5, 1.0], vec![0.8, 0.3]],
        )
        .unwrap();
        let r2 = Reward::linear(vec![0.5, -0.7]);
        let q2 = QuadratureTilted::new(&m2, &r2, 1.0, QuadratureConfig::for_dim(2)).unwrap();
        let e2 = exact_tilted(&m2, &r2, 1.0).unwrap();
        for x in [[0.0, 0.0], [1.5, -1.0], [-1.0, 1.0]] {
            let (a, b) = (q2.density(&x), e2.tilted.density(&x, 0.0));
            assert!((a - b).abs() / b < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn quadrature_density_integrates_to_one() {
        let m = bimodal();
        let r = Reward::neg_dist(vec![vec![2.5]]);
        let cfg = QuadratureConfig::for_dim(1);
        let q = QuadratureTilted::new(&m, &r, 4.0, cfg).unwrap();
        let (lo, hi) = q.window()[0];
        let n = cfg.points_per_axis;
        let h = (hi - lo) / (n - 1) as f64;
        let mass: f64 = (0..n)
            .map(|i| trapezoid_weight(i, n, h) * q.density(&[lo + i as f64 * h]))
            .sum();
        assert!((mass - 1.0).abs() < 1e-4);
    }

    #[test]
    fn quadrature_rejects_three_dimensions() {
        let m = GaussianMixture::standard_normal(3);
        let r = Reward::linear(vec![1.0, 0.0, 0.0]);
        assert_eq!(
            quadrature_tilted_density(&m, &r, 1.0, &[0.0; 3]).unwrap_err(),
            Error::UnsupportedDimension(3)
        );
    }

    proptest! {
        #[test]
        fn tilted_weights_stay_on_the_simplex(
            lambda in 0.0f64..200.0,
            a in -3.0f64..3.0,
            w0 in 0.01f64..0.99,
        ) {
            let m = GaussianMixture::new(
                vec![w0, 1.0 - w0],
                vec![vec![-2.0], vec![3.0]],
                vec![vec![0.5], vec![2.0]],
            ).unwrap();
            let o = exact_tilted(&m, &Reward::linear(vec![a]), lambda).unwrap();
            let w = o.tilted.weights();
            prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
