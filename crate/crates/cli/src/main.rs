//! `amlm`: tokenize corpora, build n-hot tables, train, and summarize weight
//! trajectories.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 invalid input or configuration,
//! 4 training divergence.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_IO: u8 = 2;
pub const EXIT_INVALID: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "amlm", version = manifest::VERSION, about = "Adaptive masked language modeling toolkit")]
struct Cli {
    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a raw corpus (one document per line) into id sequences.
    Tokenize(TokenizeArgs),
    /// Precompute the n-hot sub-token table of a vocabulary.
    Nhot(NhotArgs),
    /// Train a toy MLM with adaptive masking.
    Train(TrainArgs),
    /// Export grouped mask-weight trajectories of a finished run.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Raw text corpus, one document per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file of whitespace-separated ids, one sequence per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NhotArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output table file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Regular,
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Decay,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the manifest, checkpoints and trajectories.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Masking metric; overrides the config file.
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Masking-rate schedule; overrides the config file.
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Add n-hot sub-token features to the input embeddings.
    #[arg(long, conflicts_with = "no_nhot")]
    pub nhot: bool,
    /// Train without n-hot features.
    #[arg(long)]
    pub no_nhot: bool,
    /// Override any config key, e.g. `--set lr=0.001`. Repeatable; applied
    /// after the file and before the dedicated flags above.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint directory written by an earlier run with
    /// the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write the trajectory as JSON lines.
    #[arg(long)]
    pub jsonl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    Freq,
    Pos,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Grouping to export.
    #[arg(long, value_enum)]
    pub group: GroupArg,
    /// Token-to-tag TSV (`id<TAB>TAG`); required for `--group pos`.
    #[arg(long)]
    pub pos_map: Option<PathBuf>,
    /// Average over token occurrences instead of token types (pos only).
    #[arg(long)]
    pub occurrences: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<amlm_core::Error> for Failure {
    fn from(e: amlm_core::Error) -> Self {
        let code = if e.is_io() {
            EXIT_IO
        } else if e.is_divergence() {
            EXIT_DIVERGED
        } else {
            EXIT_INVALID
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let result = match cli.command {
        Command::Tokenize(a) => commands::tokenize(a),
        Command::Nhot(a) => commands::nhot(a),
        Command::Train(a) => commands::train(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
