//! Command-line front end for minimum information dependence models.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 the estimator does
//! not exist, 4 a solver did not converge.

pub mod commands;
pub mod config;
pub mod csvio;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::RunConfig;

/// Package version with the source revision it was built from.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("MINDEP_GIT_REV"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_EXISTENCE: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    NonExistence(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::NonExistence(_) => EXIT_NON_EXISTENCE,
            CliError::NonConvergence(_) => EXIT_NON_CONVERGENCE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mindep", version = VERSION, about = "Fit, sample and bound minimum information dependence models")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Leaves wall-clock fields out of the report.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Report destination; standard output when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate θ from a CSV file.
    Fit,
    /// Draw a sample from a model with parametric marginals.
    Sample,
    /// Correlation ranges for finite or truncated count marginals.
    Bounds,
    /// Run a simulation study.
    Simulate {
        /// A named scenario; overrides the configuration.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Use 1000 replications.
        #[arg(long)]
        full: bool,
    },
}

/// What a command produced: the report bytes, a human readable summary and
/// the exit code.
#[derive(Debug)]
pub struct Outcome {
    pub report: Vec<u8>,
    pub summary: String,
    pub code: i32,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.output.is_some() {
        cfg.output = cli.output.clone();
    }
    Ok(cfg)
}

/// Runs one command without touching the process state.
pub fn execute(cli: &Cli) -> Result<(Outcome, Option<PathBuf>), CliError> {
    let cfg = load_config(cli)?;
    let needs_config = !matches!(cli.command, Command::Simulate { .. });
    if needs_config && cli.config.is_none() {
        return Err(CliError::Config("--config is required".into()));
    }
    let stamp = !cli.no_timestamp;
    let outcome = match &cli.command {
        Command::Fit => commands::fit(&cfg, stamp)?,
        Command::Sample => commands::sample(&cfg)?,
        Command::Bounds => commands::bounds(&cfg, stamp)?,
        Command::Simulate {
            scenario,
            reps,
            full,
        } => {
            let reps = if *full { Some(1000) } else { *reps };
            commands::simulate(&cfg, scenario.as_deref(), reps, stamp)?
        }
    };
    Ok((outcome, cfg.output))
}

fn emit(outcome: &Outcome, output: Option<&PathBuf>) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    match output {
        Some(path) => std::fs::write(path, &outcome.report)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        None => std::io::stdout().write_all(&outcome.report).map_err(io)?,
    }
    eprint!("{}", outcome.summary);
    Ok(())
}

/// Entry point shared by the binary: parses nothing, returns the exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("cannot size the thread pool: {e}");
        }
    }
    match execute(&cli).and_then(|(o, path)| emit(&o, path.as_ref()).map(|_| o.code)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mindep: {e}");
            e.exit_code()
        }
    }
}
