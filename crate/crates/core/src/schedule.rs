//! Variance-exploding noise schedules and time grids.
//!
//! Time is normalized to `[0, 1]` with `t = 0` the data end. The forward
//! kernel is `x_t = x_0 + sigma(t) * eps` with zero drift, so the reverse
//! process only needs `sigma(t)` and `g(t)^2 = d sigma^2 / dt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Geometric,
    Linear,
}

/// `sigma(t)` on `[0, 1]`, strictly increasing from `sigma_min` to `sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    kind: ScheduleKind,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 10.0,
            kind: ScheduleKind::Geometric,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, kind: ScheduleKind) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_min must be positive, got {sigma_min}"
            )));
        }
        if !(sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_max ({sigma_max}) must exceed sigma_min ({sigma_min})"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            kind,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn sigma_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Geometric => self.sigma_min * (self.sigma_max / self.sigma_min).powf(t),
            ScheduleKind::Linear => self.sigma_min + t * (self.sigma_max - self.sigma_min),
        }
    }

    /// Noise scale at time `t`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    /// Inverse of [`sigma_at`](Self::sigma_at).
    pub fn time_of_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= self.sigma_min && sigma <= self.sigma_max) {
            return Err(Error::Domain(format!(
                "sigma {sigma} outside [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        let t = match self.kind {
            ScheduleKind::Geometric => {
                (sigma / self.sigma_min).ln() / (self.sigma_max / self.sigma_min).ln()
            }
            ScheduleKind::Linear => (sigma - self.sigma_min) / (self.sigma_max - self.sigma_min),
        };
        Ok(t.clamp(0.0, 1.0))
    }

    /// `g(t) = sqrt(d sigma^2(t) / dt)` for the zero-drift forward SDE.
    pub fn diffusion_coefficient(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("time {t} outside (0, 1]")));
        }
        let sigma = self.sigma_unchecked(t);
        let dsigma2 = match self.kind {
            ScheduleKind::Geometric => 2.0 * (self.sigma_max / self.sigma_min).ln() * sigma * sigma,
            ScheduleKind::Linear => 2.0 * sigma * (self.sigma_max - self.sigma_min),
        };
        Ok(dsigma2.sqrt())
    }

    /// `integral_{t_lo}^{t_hi} g(t)^2 dt = sigma^2(t_hi) - sigma^2(t_lo)`.
    pub fn variance_increment(&self, t_hi: f64, t_lo: f64) -> Result<f64> {
        check_time(t_hi)?;
        check_time(t_lo)?;
        let hi = self.sigma_unchecked(t_hi);
        let lo = self.sigma_unchecked(t_lo);
        Ok(hi * hi - lo * lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Evenly spaced in `t`.
    Uniform,
    /// Evenly spaced in `sigma`.
    SigmaUniform,
}

/// Solver time points in sampling order, strictly decreasing, all in `(0, 1]`.
///
/// A chain evaluates the score once at every grid time and steps to the next
/// one; the last step lands on `t = 0`, where `sigma = sigma_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Wraps explicit times after checking the ordering invariants.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Argument("time grid needs at least one point".into()));
        }
        if times.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Domain("grid times must lie in (0, 1]".into()));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain(
                "grid times must be strictly decreasing".into(),
            ));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of solver steps (= score evaluations per chain).
    pub fn steps(&self) -> usize {
        self.times.len()
    }

    /// `(t_hi, t_lo)` pairs in sampling order, ending at `t_lo = 0`.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times
            .iter()
            .enumerate()
            .map(move |(k, &t)| (t, self.times.get(k + 1).copied().unwrap_or(0.0)))
    }
}

/// A `steps`-point grid from `t = 1` down toward the data end.
///
/// `Uniform` yields `1, (steps-1)/steps, ..., 1/steps`; `SigmaUniform` yields
/// the times whose sigma values are `sigma_min + k (sigma_max - sigma_min) / steps`
/// for `k = steps, ..., 1`.
pub fn make_grid(schedule: &NoiseSchedule, steps: usize, kind: GridKind) -> Result<TimeGrid> {
    make_grid_from(schedule, 1.0, steps, kind)
}

/// Like [`make_grid`] but starting at `t_start` instead of 1. Used for
/// inner posterior chains launched from an intermediate state.
pub fn make_grid_from(
    schedule: &NoiseSchedule,
    t_start: f64,
    steps: usize,
    kind: GridKind,
) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::Argument("grid needs at least one step".into()));
    }
    if !(t_start > 0.0 && t_start <= 1.0) {
        return Err(Error::Domain(format!(
            "grid start {t_start} outside (0, 1]"
        )));
    }
    let n = steps as f64;
    let times = match kind {
        GridKind::Uniform => (0..steps).map(|k| t_start * (n - k as f64) / n).collect(),
        GridKind::SigmaUniform => {
            let s_lo = schedule.sigma_min();
            let s_hi = schedule.sigma_unchecked(t_start);
            (0..steps)
                .map(|k| {
                    let sigma = s_lo + (s_hi - s_lo) * (n - k as f64) / n;
                    schedule.time_of_sigma(sigma.min(schedule.sigma_max()))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    TimeGrid::from_times(times)
}
