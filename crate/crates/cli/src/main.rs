//! `grafs`: search, retrain, plot and audit scalar activation functions.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::ConfigError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "grafs",
    version,
    about = "Gradient-based search for scalar activation functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (`key = value` lines); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run this one seed instead of `run.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `run.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Seeds run concurrently; capped by GRAFS_THREADS.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub parallel: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search for an activation; writes one directory per seed.
    Search(RunArgs),
    /// Train fresh networks with a fixed activation and report test metrics.
    Retrain {
        #[command(flatten)]
        run: RunArgs,
        /// Exported activation file or built-in name (ReLU, GELU, F_RN^4, ...).
        #[arg(long)]
        activation: String,
    },
    /// Sample an activation on an even grid as `x,f` CSV.
    PlotGrid {
        #[arg(long)]
        activation: String,
        #[arg(long, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 201)]
        n: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-round drop counts as `epoch,drops` CSV.
    Schedule {
        /// First shrinking round; defaults to the config's.
        #[arg(long)]
        start: Option<usize>,
        /// Last round; defaults to the config's total rounds.
        #[arg(long)]
        end: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare every analytic derivative against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately perturb one derivative; exercises the failure path.
        #[arg(long, hide = true)]
        break_op: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(run) => commands::search(&run),
        Command::Retrain { run, activation } => commands::retrain(&run, &activation),
        Command::PlotGrid {
            activation,
            lo,
            hi,
            n,
            out,
        } => commands::plot_grid(&activation, lo, hi, n, out.as_deref()),
        Command::Schedule { start, end, config } => commands::schedule(start, end, config.as_deref()),
        Command::Gradcheck { seed, break_op } => commands::gradcheck(seed, break_op.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
