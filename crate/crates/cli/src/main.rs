//! `deepstate` command-line tool.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepstate::datamodel::Mode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<deepstate::Error> for CliError {
    fn from(e: deepstate::Error) -> Self {
        match e {
            deepstate::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deepstate", version, about = "Traffic estimation at unobserved sensors through latent state nodes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (TOML). Missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the training / partition seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Comma-separated query ratios in (0, 1).
    #[arg(long, global = true, value_delimiter = ',')]
    pub query_ratios: Option<Vec<f64>>,
    /// Comma-separated sensor counts for the benchmark.
    #[arg(long, global = true, value_delimiter = ',')]
    pub sensor_counts: Option<Vec<usize>>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write sensors.csv, readings.csv, context.csv and metadata.json.
    GenerateData,
    /// Train on the train split with early stopping on validation.
    Train,
    /// Metrics of a checkpoint on the test split, plus baselines.
    Evaluate {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the assignment, Laplacian and pooled vectors of this
        /// test window.
        #[arg(long)]
        dump_window: Option<usize>,
    },
    /// Full model against the four ablated variants.
    Ablate,
    /// Per-epoch training time across sensor counts.
    Benchmark,
    /// Plots from history, sweep or benchmark files.
    Plot {
        /// Source files; defaults to every known result file in `<out>`.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
}

fn configure_workers() {
    let var = std::env::var("DEEPSTATE_NUM_WORKERS").or_else(|_| std::env::var("TOOL_NUM_WORKERS"));
    if let Ok(n) = var.map(|v| v.trim().parse::<usize>()) {
        match n {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid worker count"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_workers();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
