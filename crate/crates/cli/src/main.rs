use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tilted_cli::commands::{cmd_lookahead, cmd_sample, cmd_sweep, cmd_verify, load_config};
use tilted_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "tilted",
    version,
    about = "Lookahead-sample reward guidance on analytic diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and annotate a lookahead pool.
    Lookahead {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the configured sampler and append one CSV row.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the estimators and gradient against independent references.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Run the cross product of the [sweep] axes, one CSV row per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("TILTED_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "TILTED_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn execute(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Lookahead { config, out, seed } => {
            let summary = cmd_lookahead(&load_config(&config, seed)?, &out)?;
            println!("{summary}");
        }
        Command::Sample {
            config,
            pool,
            out,
            seed,
        } => {
            let record = cmd_sample(&load_config(&config, seed)?, pool.as_deref(), &out)?;
            println!(
                "{} chains={} reward_mean={:.6} score_evals={}",
                record.method, record.chains, record.mean_reward, record.score_evals
            );
        }
        Command::Verify {
            config,
            seed,
            corrupt_gradient,
        } => {
            let raw = config.map(|path| load_config(&path, seed)).transpose()?;
            let checks = cmd_verify(raw.as_ref(), seed, corrupt_gradient)?;
            for check in &checks {
                println!("{}", check.line());
            }
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name)
                .collect();
            if !failed.is_empty() {
                return Err(CliError::Verify(format!(
                    "failed checks: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Sweep { config, out, seed } => {
            let records = cmd_sweep(&load_config(&config, seed)?, &out, &mut |line| {
                eprintln!("{line}")
            })?;
            println!("{} rows written to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let msg = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let err = CliError::Usage(msg.to_string());
            eprintln!("{}", err.line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
