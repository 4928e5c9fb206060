//! Executes configured runs: pools, sampling cells and sweeps.

use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use tilted_core::analytic_models::{
    exact_tilted, GaussianMixture, QuadratureConfig, QuadratureTilted,
};
use tilted_core::efr::AnnotatedSamples;
use tilted_core::lookahead::{generate_pool, LookaheadPool};
use tilted_core::metrics::{efr_error_protocol, summarize, tv_1d, EfrProtocol, RunMeta, RunRecord};
use tilted_core::particles::{best_of_n, smc_bon, smc_run, SmcConfig};
use tilted_core::rng::sub_seed;
use tilted_core::samplers::Sampler;

use crate::config::{ParticleMode, RawConfig, RunConfig};
use crate::error::{CliError, CliResult};

/// Half-width of the TV window in target standard deviations.
const TV_WINDOW_SD: f64 = 8.0;

pub fn build_pool(cfg: &RunConfig, seed: u64) -> CliResult<LookaheadPool> {
    Ok(generate_pool(
        &cfg.context_id,
        &cfg.model,
        &cfg.reward,
        &cfg.schedule,
        cfg.delta,
        cfg.guidance.n,
        cfg.solver,
        seed,
    )?)
}

pub fn pool_hash(pool: &LookaheadPool) -> String {
    hex::encode(Sha256::digest(pool.to_json().as_bytes()))
}

/// Checks that a pool can steer this configuration and returns its
/// first `guidance.n` samples.
pub fn check_pool(cfg: &RunConfig, pool: &LookaheadPool) -> CliResult<AnnotatedSamples> {
    if pool.context_id != cfg.context_id {
        return Err(CliError::Config(format!(
            "pool context {:?} does not match config context {:?}",
            pool.context_id, cfg.context_id
        )));
    }
    if pool.dim() != cfg.model.dim() {
        return Err(CliError::PoolInvalid(format!(
            "pool dimension {} does not match model dimension {}",
            pool.dim(),
            cfg.model.dim()
        )));
    }
    if pool.len() < cfg.guidance.n {
        return Err(CliError::Config(format!(
            "pool holds {} samples but guidance.n is {}",
            pool.len(),
            cfg.guidance.n
        )));
    }
    Ok(pool.truncated(cfg.guidance.n).annotated()?)
}

type Density = Box<dyn Fn(f64) -> f64 + Sync>;

/// 1D density of the reward-tilted target along `coord` plus a window that
/// covers it, when an oracle exists.
fn tilted_marginal(cfg: &RunConfig) -> CliResult<Option<(Density, (f64, f64))>> {
    let coord = cfg.experiment.tv_coord;
    let lambda = cfg.guidance.lambda;
    if cfg.reward.is_linear() {
        let tilted = exact_tilted(&cfg.model, &cfg.reward, lambda)?
            .tilted
            .marginal(coord)?;
        let window = mixture_window(&tilted);
        return Ok(Some((Box::new(move |x| tilted.density(&[x], 0.0)), window)));
    }
    if cfg.model.dim() == 1 {
        let q = QuadratureTilted::new(
            &cfg.model,
            &cfg.reward,
            lambda,
            QuadratureConfig::for_dim(1),
        )?;
        let window = q.window()[0];
        return Ok(Some((Box::new(move |x| q.density(&[x])), window)));
    }
    Ok(None)
}

fn mixture_window(m: &GaussianMixture) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (mu, var) in m.means().iter().zip(m.variances()) {
        let sd = var[0].sqrt();
        lo = lo.min(mu[0] - TV_WINDOW_SD * sd);
        hi = hi.max(mu[0] + TV_WINDOW_SD * sd);
    }
    (lo, hi)
}

/// Runs one configured experiment and summarizes it into a CSV row.
/// `pool` must be present for the pool-based methods.
pub fn run_cell(
    cfg: &RunConfig,
    pool: Option<&LookaheadPool>,
    run_id: &str,
) -> CliResult<RunRecord> {
    let started = Instant::now();
    let seed = cfg.experiment.seed;
    let annotated = match (cfg.needs_pool(), pool) {
        (true, None) => {
            return Err(CliError::Config(format!(
                "method {} needs a lookahead pool (--pool)",
                cfg.method.name()
            )))
        }
        (true, Some(p)) => Some(check_pool(cfg, p)?),
        (false, _) => None,
    };
    let sampler = Sampler::new(
        cfg.sampler_spec()?,
        &cfg.model,
        &cfg.reward,
        &cfg.schedule,
        annotated.as_ref(),
    )?;
    let n = cfg.chains;
    let reps = cfg.experiment.repetitions as u64;
    let rep_seed = |k: u64| if reps == 1 { seed } else { sub_seed(seed, k) };
    let smc = SmcConfig {
        particles: n,
        ..cfg.smc
    };
    let (samples, evals): (Vec<Vec<f64>>, Vec<u64>) = match cfg.particles {
        ParticleMode::Independent => {
            let mut samples = Vec::new();
            let mut evals = Vec::new();
            for k in 0..reps {
                for out in sampler.run_chains(rep_seed(k), n)? {
                    samples.push(out.x_final);
                    evals.push(out.score_evals);
                }
            }
            (samples, evals)
        }
        ParticleMode::Smc => {
            let mut samples = Vec::new();
            let mut evals = Vec::new();
            for k in 0..reps {
                let out = smc_run(&sampler, &smc, rep_seed(k))?;
                samples.extend(out.samples);
                evals.push(out.score_evals);
            }
            (samples, evals)
        }
        ParticleMode::Bon | ParticleMode::SmcBon => (0..reps)
            .map(|k| {
                let sel = if cfg.particles == ParticleMode::Bon {
                    best_of_n(&sampler, n, rep_seed(k))?
                } else {
                    smc_bon(&sampler, &smc, rep_seed(k))?
                };
                Ok((sel.x, sel.score_evals))
            })
            .collect::<CliResult<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    let uses_pool = annotated.is_some();
    let method = match cfg.particles {
        ParticleMode::Independent => cfg.method.name().to_string(),
        mode => format!("{}+{}", mode.name(), cfg.method.name()),
    };
    let meta = RunMeta {
        run_id: run_id.to_string(),
        method,
        seed,
        n: uses_pool.then_some(cfg.guidance.n),
        delta: uses_pool.then_some(cfg.delta),
        lambda: cfg.guidance.lambda,
        s: cfg.guidance.s,
        tau: cfg.tau,
    };
    let mut record = summarize(meta, &samples, &evals, &cfg.reward)?;
    record.chains = n;
    if cfg.experiment.tv {
        if let Some((density, window)) = tilted_marginal(cfg)? {
            let xs: Vec<f64> = samples.iter().map(|x| x[cfg.experiment.tv_coord]).collect();
            record.tv = Some(tv_1d(&xs, density, cfg.experiment.tv_bins, window)?);
        }
    }
    if cfg.experiment.efr_trajectories > 0 {
        if let Some(pool) = &annotated {
            let protocol = EfrProtocol::new(
                cfg.experiment.efr_trajectories,
                cfg.tau,
                cfg.experiment.efr_n_true,
            );
            let e = efr_error_protocol(
                &cfg.model,
                &cfg.reward,
                &cfg.guidance,
                &cfg.schedule,
                pool,
                &protocol,
                seed,
            )?;
            record.efr_mse_taylor = Some(e.mse_taylor);
            record.efr_mse_lidar = Some(e.mse_lidar);
        }
    }
    if cfg.experiment.record_wall {
        record.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(record)
}

/// One cell of a sweep: its overrides and the resulting configuration.
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

/// Expands the declared sweep axes into their cross product. The first axis
/// varies slowest.
pub fn expand_sweep(raw: &RawConfig) -> CliResult<Vec<Cell>> {
    if raw.sweep.is_empty() {
        return Err(CliError::Usage(
            "sweep needs a [sweep] section with at least one axis".into(),
        ));
    }
    let mut axes = Vec::new();
    for (name, values) in &raw.sweep {
        let (section, key) = RawConfig::resolve_axis(name)
            .ok_or_else(|| CliError::Usage(format!("unknown sweep parameter {name:?}")))?;
        axes.push((name.as_str(), section, key, values));
    }
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for (_, _, _, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..values.len()).map(move |i| {
                    let mut c = c.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|combo| {
            let mut cell = raw.clone();
            let mut label = Vec::new();
            for (&i, (name, section, key, values)) in combo.iter().zip(&axes) {
                cell.set(section, key, &values[i]);
                label.push(format!("{name}={}", values[i]));
            }
            Ok(Cell {
                label: label.join(";"),
                config: RunConfig::from_raw(&cell)?,
            })
        })
        .collect()
}

/// Key under which sweep cells may share a pool.
fn pool_key(cfg: &RunConfig, seed: u64) -> (usize, usize, &'static str, u64) {
    (cfg.guidance.n, cfg.delta, cfg.solver.name(), seed)
}

/// Runs every sweep cell. Pools are generated once per distinct
/// `(n, delta, solver, seed)` and reused by cells that only differ in other
/// parameters; unshared pools take a per-cell seed. Rows come back in
/// declaration order regardless of scheduling.
pub fn run_sweep(
    cells: &[Cell],
    base_run_id: &str,
    log: &mut dyn FnMut(&str),
) -> CliResult<Vec<RunRecord>> {
    let pool_seed = |i: usize, c: &RunConfig| {
        if c.experiment.share_pool {
            c.experiment.seed
        } else {
            sub_seed(c.experiment.seed, i as u64)
        }
    };
    let mut keys: Vec<(usize, usize, &'static str, u64)> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        if cell.config.needs_pool() {
            let k = pool_key(&cell.config, pool_seed(i, &cell.config));
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let mut pools = Vec::with_capacity(keys.len());
    for &key in &keys {
        let cell = cells
            .iter()
            .enumerate()
            .find(|(i, c)| {
                c.config.needs_pool() && pool_key(&c.config, pool_seed(*i, &c.config)) == key
            })
            .map(|(_, c)| c)
            .expect("every key comes from a cell");
        let pool = build_pool(&cell.config, key.3)?;
        log(&format!(
            "pool n={} delta={} solver={} seed={} score_evals={} sha256={}",
            key.0,
            key.1,
            key.2,
            key.3,
            pool.score_evals(),
            pool_hash(&pool)
        ));
        pools.push(pool);
    }
    cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let pool = cell.config.needs_pool().then(|| {
                let k = pool_key(&cell.config, pool_seed(i, &cell.config));
                &pools[keys.iter().position(|x| *x == k).expect("pool generated")]
            });
            run_cell(&cell.config, pool, &format!("{base_run_id}:{}", cell.label))
        })
        .collect()
}
