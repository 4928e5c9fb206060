//! The four subcommands, independent of argument parsing.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use tilted_core::efr::GuidanceConfig;
use tilted_core::lookahead::{load_pool, save_pool, LookaheadPool};
use tilted_core::metrics::{write_csv, RunRecord};

use crate::config::{RawConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{build_pool, expand_sweep, pool_hash, run_cell, run_sweep};
use crate::verify::{run_all, CheckResult, VerifyOptions};

/// Loads a config file and applies a `--seed` override.
pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RawConfig> {
    let mut raw = RawConfig::load(path)?;
    if let Some(seed) = seed {
        raw.set("experiment", "seed", &seed.to_string());
    }
    Ok(raw)
}

pub fn pool_summary(pool: &LookaheadPool) -> String {
    let rewards: Vec<f64> = pool.samples.iter().map(|s| s.reward).collect();
    let min = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    format!(
        "n={} delta={} solver={} reward_min={min:.6} reward_mean={mean:.6} reward_max={max:.6} score_evals={} sha256={}",
        pool.len(),
        pool.delta,
        pool.solver.name(),
        pool.score_evals(),
        pool_hash(pool)
    )
}

/// Generates the configured pool, writes it to `out` and returns its summary.
pub fn cmd_lookahead(raw: &RawConfig, out: &Path) -> CliResult<String> {
    let cfg = RunConfig::from_raw(raw)?;
    let pool = build_pool(&cfg, cfg.experiment.seed)?;
    save_pool(&pool, out)?;
    Ok(pool_summary(&pool))
}

fn write_records(out: &Path, records: &[RunRecord], append: bool) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Io(format!("cannot write {}: {e}", out.display()));
    let fresh = !append || std::fs::metadata(out).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(out)
        .map_err(io)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, records, fresh)?;
    file.write_all(&buf).map_err(io)
}

/// Runs one configured cell and appends its row to `out`, writing the header
/// when the file is new or empty.
pub fn cmd_sample(raw: &RawConfig, pool: Option<&Path>, out: &Path) -> CliResult<RunRecord> {
    let cfg = RunConfig::from_raw(raw)?;
    let pool = pool.map(load_pool).transpose()?;
    let record = run_cell(&cfg, pool.as_ref(), &cfg.experiment.run_id)?;
    write_records(out, std::slice::from_ref(&record), true)?;
    Ok(record)
}

/// Runs the self-checks; fails with a verify error unless all pass.
/// Without a config the default lambda is used and the seed defaults to 0.
pub fn cmd_verify(
    raw: Option<&RawConfig>,
    seed: Option<u64>,
    corrupt_gradient: bool,
) -> CliResult<Vec<CheckResult>> {
    let opts = match raw {
        Some(raw) => {
            let cfg = RunConfig::from_raw(raw)?;
            VerifyOptions {
                lambda: cfg.guidance.lambda,
                seed: cfg.experiment.seed,
                corrupt_gradient,
            }
        }
        None => VerifyOptions {
            lambda: GuidanceConfig::default().lambda,
            seed: seed.unwrap_or(0),
            corrupt_gradient,
        },
    };
    run_all(&opts)
}

/// Expands and runs a sweep, writing a fresh CSV with one row per cell.
pub fn cmd_sweep(
    raw: &RawConfig,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> CliResult<Vec<RunRecord>> {
    let cells = expand_sweep(raw)?;
    let base = RunConfig::from_raw(raw)?;
    let records = run_sweep(&cells, &base.experiment.run_id, log)?;
    write_records(out, &records, false)?;
    Ok(records)
}
