//! Command-line driver: configuration, subcommands and output files.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod report;

pub use config::{load_config, parse_config, RunConfig};
pub use report::{Check, RunReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("invalid configuration: {message}")]
    Invalid { message: String },
    #[error("{failed} asserted check(s) failed")]
    ChecksFailed { failed: usize },
    #[error("solver failure: {message}")]
    Solver { message: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code: 2 config/schema, 3 invariant failure, 4 solver
    /// failure, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Invalid { .. } => 2,
            CliError::ChecksFailed { .. } => 3,
            CliError::Solver { .. } => 4,
            CliError::Io { .. } => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vortwave", version, about = "Water waves with constant vorticity over variable bathymetry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write little-endian binary snapshots.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the evolution equations and record conserved quantities.
    Simulate(CommonArgs),
    /// Check the operator family: adjoint identities and flat closed forms.
    DnoCheck(CommonArgs),
    /// Check the paralinearization remainder and the symmetrizer.
    ParalinCheck(CommonArgs),
    /// Tabulate the linear dispersion relation against an eigen-oracle.
    Dispersion(CommonArgs),
    /// Self-convergence of the operator under grid refinement.
    Convergence(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::DnoCheck(a)
            | Command::ParalinCheck(a)
            | Command::Dispersion(a)
            | Command::Convergence(a) => a,
        }
    }
}

/// Load the configuration and run one subcommand. A report whose checks
/// fail is turned into [`CliError::ChecksFailed`] after it has been written.
pub fn run(command: &Command) -> Result<RunReport, CliError> {
    let args = command.args();
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let base_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let ctx = commands::Context { config, base_dir: &base_dir, out: &args.out, binary: args.binary };
    let report = match command {
        Command::Simulate(_) => commands::simulate(&ctx)?,
        Command::DnoCheck(_) => commands::dno_check(&ctx)?,
        Command::ParalinCheck(_) => commands::paralin_check(&ctx)?,
        Command::Dispersion(_) => commands::dispersion(&ctx)?,
        Command::Convergence(_) => commands::convergence(&ctx)?,
    };
    if report.pass {
        Ok(report)
    } else {
        Err(CliError::ChecksFailed { failed: report.failed() })
    }
}

/// Apply the `VORTWAVE_THREADS` cap, if set.
pub fn apply_thread_cap() -> Result<(), CliError> {
    match std::env::var("VORTWAVE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Invalid { message: format!("VORTWAVE_THREADS={v:?} is not a positive integer") })?;
            vortwave::set_thread_cap(n);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}
