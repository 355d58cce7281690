mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code 2 is a problem with the user's inputs, 1 anything else.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl From<leopard_core::Error> for CliError {
    fn from(e: leopard_core::Error) -> Self {
        use leopard_core::Error as E;
        match e {
            E::Config(_) | E::Dimension(_) | E::Parameter(_) | E::Trace { .. } | E::Json(_) => Self::User(e.to_string()),
            E::Io(_) | E::Usage(_) | E::Training { .. } => Self::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "leopard", version, about = "Learned attention-score pruning: trace generation, threshold training and tile simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic workload trace with a prescribed pruning rate.
    GenSynthetic(GenArgs),
    /// Fine-tune thresholds on the toy task; writes per-epoch records and the learned thresholds.
    Train(TrainArgs),
    /// Simulate a trace on a tile and on the baseline.
    Simulate(SimArgs),
    /// Sweep the DPU count or the serial granularity; writes CSV.
    Sweep(SweepArgs),
    /// Check a trace file against the format and its invariants.
    ValidateTrace(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SyntheticPreset {
    Default,
    Memn2n,
    LowPruning,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Distribution {
    Gaussian,
    Clustered,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run config; its `[synthetic]` table overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: SyntheticPreset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub valid_len: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub target_pruning: Option<f64>,
    #[arg(long, value_enum)]
    pub distribution: Option<Distribution>,
    /// Loading spread of the clustered distribution.
    #[arg(long)]
    pub signal: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML run config with optional `[setup]` and `[hp]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; data, model, pretraining and fine-tuning seeds derive from it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, conflicts_with = "select_lambda")]
    pub lambda: Option<f64>,
    /// Pick lambda from the default grid instead of using a fixed value.
    #[arg(long)]
    pub select_lambda: bool,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// TOML run config with optional `preset`, `[tile]` and `[energy]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["ae", "hp"])]
    pub preset: Option<String>,
    /// Energy table (TOML or JSON); keys override the default table.
    #[arg(long)]
    pub energy_table: Option<PathBuf>,
    #[arg(long)]
    pub n_qk: Option<usize>,
    #[arg(long)]
    pub bits_per_cycle: Option<u32>,
    /// Depth of both the score and the index FIFO.
    #[arg(long)]
    pub fifo_depth: Option<usize>,
    #[arg(long)]
    pub no_pruning: bool,
    /// Per-layer thresholds written by `train`, replacing the trace's.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub tile: TileArgs,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepKind {
    Nqk,
    Bits,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(value_enum)]
    pub kind: SweepKind,
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub tile: TileArgs,
    /// Inclusive DPU-count range for `nqk`, as `lo..hi`.
    #[arg(long, default_value = "3..12")]
    pub range: String,
    /// Comma-separated granularities for `bits`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,12")]
    pub bits: Vec<u32>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub trace: PathBuf,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LEOPARD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::User(format!("LEOPARD_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::ValidateTrace(a) => commands::validate_trace(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::User(_) => ExitCode::from(2),
                CliError::Internal(_) => ExitCode::from(1),
            }
        }
    }
}
