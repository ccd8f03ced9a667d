//! Experiment harness behind the `pgcn` binary.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod plot;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A failure with its process exit code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    /// Any core error raised while reading a configuration file.
    pub fn config_from(e: pgcn_core::Error) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<pgcn_core::Error> for CliError {
    fn from(e: pgcn_core::Error) -> Self {
        use pgcn_core::Error as E;
        let code = match &e {
            E::Config(_) | E::UndefinedMetric(_) | E::Dimension { .. } | E::Shape { .. } => {
                EXIT_CONFIG
            }
            E::Io { .. } | E::Parse { .. } | E::DegenerateData(_) | E::Length { .. } => EXIT_DATA,
            E::Numeric { .. } | E::Diverged { .. } | E::NonDeterministic { .. } => EXIT_NUMERIC,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pgcn",
    version,
    about = "Train and evaluate progressive graph convolutional networks"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write run_config.txt, train_log.csv, checkpoint/ and metrics.csv.
    Train(CommonArgs),
    /// Evaluate a checkpoint (or a baseline) on one split.
    Eval(EvalArgs),
    /// Train and evaluate every adjacency combination.
    Ablate(CommonArgs),
    /// Export progressive adjacency weights over time.
    ExportAdjacency(ExportArgs),
    /// Render a CSV written by this tool as an SVG chart.
    Plot(PlotArgs),
    /// Generate a synthetic dataset with drifting node correlations.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// key=value run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Signal CSV (`timestamp,<sensor>,...`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Edge-list CSV (`from,to[,weight]`).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint (`ha`).
    #[arg(long)]
    pub baseline: Option<String>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Node pair `i,j` (sensor names).
    #[arg(long)]
    pub nodes: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Earliest window end time to export (inclusive).
    #[arg(long)]
    pub start: Option<String>,
    /// Latest window end time to export (inclusive).
    #[arg(long)]
    pub end: Option<String>,
    /// Also dump the full matrix of the window ending at this time.
    #[arg(long)]
    pub at: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// CSV file to plot.
    #[arg(long)]
    pub csv: PathBuf,
    /// train-log, adjacency or metrics.
    #[arg(long)]
    pub kind: String,
    /// Output path stem; defaults to the CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// key=value synthetic specification.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override a specification key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn threads_from_env() {
    match std::env::var("PGCN_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 1 => log::warn!("PGCN_THREADS={n}: execution is single-threaded; using 1"),
            Ok(_) => {}
            Err(_) => log::warn!("ignoring PGCN_THREADS={v}: not a number"),
        },
        Err(_) => {}
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    threads_from_env();
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::ExportAdjacency(a) => commands::export_adjacency(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
