//! Lookahead pools: cheap final samples with their rewards, generated once
//! and shared by every target chain.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic_models::{GaussianMixture, Reward};
use crate::efr::AnnotatedSamples;
use crate::error::Error;
use crate::rng::{stream_rng, sub_seed};
use crate::samplers::{step_guided, ChainState, Guidance, StepOptions};
use crate::schedule::{make_grid, GridKind, NoiseSchedule};

/// Keeps pool streams apart from target-chain streams under the same seed.
const POOL_STREAM_TAG: u64 = 0x706f_6f6c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Reverse SDE, Euler-Maruyama.
    SdeEuler,
    /// Probability-flow ODE, Euler.
    OdeEuler,
    /// Exact draws from the mixture; a perfect one-step generator.
    Oracle,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::SdeEuler => "sde_euler",
            SolverKind::OdeEuler => "ode_euler",
            SolverKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sde_euler" => Some(SolverKind::SdeEuler),
            "ode_euler" => Some(SolverKind::OdeEuler),
            "oracle" => Some(SolverKind::Oracle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSample {
    pub x: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadPool {
    pub context_id: String,
    pub delta: usize,
    pub solver: SolverKind,
    pub seed: u64,
    pub samples: Vec<PoolSample>,
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    context_id: String,
    delta: usize,
    solver: SolverKind,
    seed: u64,
    dim: usize,
    samples: Vec<PoolSample>,
}

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed pool file: {0}")]
    Parse(String),
    #[error("invalid pool: {0}")]
    Validation(String),
    #[error("pool dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl LookaheadPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    /// Score evaluations spent generating the pool: `delta` per sample for
    /// the Euler solvers, none for the oracle.
    pub fn score_evals(&self) -> u64 {
        match self.solver {
            SolverKind::Oracle => 0,
            _ => (self.delta * self.samples.len()) as u64,
        }
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if self.samples.is_empty() {
            return Err(PoolError::Validation(
                "pool must contain at least one sample".into(),
            ));
        }
        if self.delta == 0 {
            return Err(PoolError::Validation("delta must be >= 1".into()));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(PoolError::Validation(
                "samples must have dimension >= 1".into(),
            ));
        }
        for s in &self.samples {
            if s.x.len() != dim {
                return Err(PoolError::DimensionMismatch {
                    expected: dim,
                    found: s.x.len(),
                });
            }
            if !s.reward.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(PoolError::Validation("pool entries must be finite".into()));
            }
        }
        Ok(())
    }

    /// Flat view for the guidance kernels.
    pub fn annotated(&self) -> crate::Result<AnnotatedSamples> {
        let dim = self.dim();
        let points = self
            .samples
            .iter()
            .flat_map(|s| s.x.iter().copied())
            .collect();
        let rewards = self.samples.iter().map(|s| s.reward).collect();
        let a = AnnotatedSamples::from_flat(dim, points, rewards)?;
        Ok(if self.solver == SolverKind::Oracle {
            a.from_exact_distribution()
        } else {
            a
        })
    }

    /// The first `n` samples as a pool of its own.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let file = PoolFile {
            context_id: self.context_id.clone(),
            delta: self.delta,
            solver: self.solver,
            seed: self.seed,
            dim: self.dim(),
            samples: self.samples.clone(),
        };
        serde_json::to_string(&file).expect("pool serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, PoolError> {
        let file: PoolFile =
            serde_json::from_str(text).map_err(|e| PoolError::Parse(e.to_string()))?;
        let pool = Self {
            context_id: file.context_id,
            delta: file.delta,
            solver: file.solver,
            seed: file.seed,
            samples: file.samples,
        };
        pool.validate()?;
        if pool.dim() != file.dim {
            return Err(PoolError::DimensionMismatch {
                expected: file.dim,
                found: pool.dim(),
            });
        }
        Ok(pool)
    }
}

/// Runs the `delta`-step solver from `n` prior draws and annotates each final
/// sample with its reward. Sample `i` uses its own random stream, so the pool
/// does not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn generate_pool(
    context_id: &str,
    model: &GaussianMixture,
    reward: &Reward,
    schedule: &NoiseSchedule,
    delta: usize,
    n: usize,
    solver: SolverKind,
    seed: u64,
) -> crate::Result<LookaheadPool> {
    if delta == 0 {
        return Err(Error::Argument("delta must be >= 1".into()));
    }
    if n == 0 {
        return Err(Error::Argument("pool size n must be >= 1".into()));
    }
    reward.validate(model.dim())?;
    let grid = make_grid(schedule, delta, GridKind::Uniform)?;
    let pool_seed = sub_seed(seed, POOL_STREAM_TAG);
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let x = match solver {
                SolverKind::Oracle => model.sample(&mut stream_rng(pool_seed, i)),
                SolverKind::SdeEuler | SolverKind::OdeEuler => {
                    let opts = StepOptions::new(solver == SolverKind::SdeEuler);
                    let mut state = ChainState::from_prior(model.dim(), schedule, pool_seed, i);
                    for (hi, lo) in grid.intervals() {
                        step_guided(&mut state, model, schedule, &Guidance::None, hi, lo, opts)?;
                    }
                    state.x
                }
            };
            let r = reward.eval(&x);
            Ok(PoolSample { x, reward: r })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(LookaheadPool {
        context_id: context_id.to_string(),
        delta,
        solver,
        seed,
        samples,
    })
}

pub fn save_pool(pool: &LookaheadPool, path: &Path) -> Result<(), PoolError> {
    pool.validate()?;
    std::fs::write(path, pool.to_json()).map_err(|source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_pool(path: &Path) -> Result<LookaheadPool, PoolError> {
    let text = std::fs::read_to_string(path).map_err(|source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    LookaheadPool::from_json(&text)
}
