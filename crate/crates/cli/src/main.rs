//! `rwre`: sampling, rate-function evaluation, region scans and verification
//! reports for random walks in random environment.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "rwre", version, about = "Regeneration-based rate functions for random walks in random environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, overriding the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Base seed, overriding the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Harvest regeneration increments and write the dataset.
    Sample,
    /// Evaluate J on the configured velocities.
    Rate,
    /// Scan tilts and map the velocity regions.
    Region,
    /// Run the numerical checks and write a claim report.
    Verify,
    /// Export the dataset as CSV.
    Export,
}

/// Failures with their exit codes.
pub enum Failure {
    /// Bad arguments, config or input files.
    Input(anyhow::Error),
    /// Verification finished with failing claims.
    Claims,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers.or(cfg.workers) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| anyhow::anyhow!("worker pool: {e}"))?;
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| anyhow::anyhow!("creating {}: {e}", cfg.out.display()))?;
    match cli.command {
        Command::Sample => commands::sample(&cfg)?,
        Command::Rate => commands::rate(&cfg)?,
        Command::Region => commands::region(&cfg)?,
        Command::Export => commands::export(&cfg)?,
        Command::Verify => {
            if !commands::verify(&cfg)? {
                return Err(Failure::Claims);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Claims) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
