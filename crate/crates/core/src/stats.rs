//! Small statistics toolkit used by the metrics and the test suites.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and unbiased sample variance (0 for a single value).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (m, ss / (xs.len() - 1) as f64)
}

pub fn std_dev(xs: &[f64]) -> f64 {
    mean_var(xs).1.sqrt()
}

/// Standard error of the mean.
pub fn std_err(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// Standard error of the difference of two sample means.
pub fn pooled_se(a: &[f64], b: &[f64]) -> f64 {
    let (_, va) = mean_var(a);
    let (_, vb) = mean_var(b);
    (va / a.len() as f64 + vb / b.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 1-based ranks with ties given their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument(
            "spearman needs two equal-length series of length >= 2".into(),
        ));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

/// Spearman correlation of `ys` against their index order.
pub fn trend(ys: &[f64]) -> Result<f64> {
    let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
    spearman(&xs, ys)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("KS test needs nonempty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// 1-Wasserstein distance between an empirical 1D sample and a distribution
/// with CDF `cdf`, integrating `|F_n - F|` over `[lo, hi]` on a fine grid.
pub fn wasserstein1_to_cdf(
    samples: &[f64],
    cdf: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<f64> {
    if samples.is_empty() || points < 2 || !(hi > lo) {
        return Err(Error::Argument(
            "W1 needs samples, >= 2 points and hi > lo".into(),
        ));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let h = (hi - lo) / (points - 1) as f64;
    let mut k = 0;
    let mut total = 0.0;
    let mut prev = None;
    for i in 0..points {
        let x = lo + i as f64 * h;
        while k < s.len() && s[k] <= x {
            k += 1;
        }
        let f = (k as f64 / n - cdf(x)).abs();
        if let Some(p) = prev {
            total += 0.5 * h * (p + f);
        }
        prev = Some(f);
    }
    // Mass outside the window moves at least to its edge.
    let below: f64 = s.iter().filter(|&&v| v < lo).map(|v| lo - v).sum::<f64>() / n;
    let above: f64 = s.iter().filter(|&&v| v > hi).map(|v| v - hi).sum::<f64>() / n;
    Ok(total + below + above)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((mean_var(&xs).1 - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(median(&xs), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(mean_var(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // One adjacent swap among five: 1 - 6 * 2 / 120 = 0.9.
        assert!((trend(&[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap() - 0.9).abs() < 1e-12);
        assert!(spearman(&a, &[1.0]).is_err());
    }

    #[test]
    fn ks_detects_shift_and_accepts_same_law() {
        let mut rng = stream_rng(1, 0);
        let a: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..4000).map(|_| rng.random::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
        let same = ks_two_sample(&a, &a).unwrap();
        assert_eq!(same.statistic, 0.0);
    }

    #[test]
    fn w1_of_point_mass_against_uniform() {
        // W1(delta_0.5, U[0,1]) = 1/4.
        let w = wasserstein1_to_cdf(&[0.5], |x| x.clamp(0.0, 1.0), -1.0, 2.0, 30_001).unwrap();
        assert!((w - 0.25).abs() < 1e-4);
        // A point mass at 3 against delta_0: everything outside the window counts.
        let w = wasserstein1_to_cdf(
            &[3.0],
            |x| if x >= 0.0 { 1.0 } else { 0.0 },
            -1.0,
            1.0,
            2001,
        )
        .unwrap();
        assert!((w - 3.0).abs() < 1e-3);
    }
}
