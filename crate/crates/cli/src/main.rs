//! `jointstory`: preprocess, train, evaluate, predict, analyze patterns and
//! run gradient checks from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jointstory::model::Variant;
use jointstory::text::Split;
use jointstory::Error;

#[derive(Parser)]
#[command(name = "jointstory", version, about = "Joint key-element extraction and story classification")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the data-reading commands. Flags win over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file (line-delimited story records).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Split assignment file.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a corpus and write stories, vocabulary and split counts.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        /// Minimum training-split frequency for a vocabulary entry.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Train a model; writes a checkpoint, the metric log and the effective config.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Count classes absent from gold and predictions as F1 = 0.
        #[arg(long)]
        include_absent: bool,
    },
    /// Tag and classify one raw story read from a file or standard input.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Story text file; standard input when absent or "-".
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Label distributions, cross-tabulations and chi-square tests.
    Analyze {
        #[command(flatten)]
        data: DataArgs,
        /// Use this model's predictions instead of the gold labels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one split (default: every story).
        #[arg(long)]
        split: Option<Split>,
        /// Drop unspecified classes (true) or keep them (false). Without
        /// the flag both modes are reported.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        exclude_unspecified: Option<bool>,
        /// Apply the continuity correction to 2×2 tables.
        #[arg(long)]
        yates: bool,
    },
    /// Finite-difference gradient check of every variant.
    Gradcheck {
        /// Only this variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Random parameter draws per variant.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cohen's kappa between two `<story-id> <label>` files.
    Kappa { first: PathBuf, second: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Unsupported(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (_, 0) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Preprocess { data, min_count } => commands::preprocess(&data, min_count),
        Command::Train {
            data,
            variant,
            seed,
            epochs,
            checkpoint,
        } => commands::train(&data, variant, seed, epochs, checkpoint),
        Command::Eval {
            data,
            checkpoint,
            split,
            include_absent,
        } => commands::eval(&data, checkpoint, split, include_absent),
        Command::Predict { checkpoint, input } => commands::predict(&checkpoint, input.as_deref()),
        Command::Analyze {
            data,
            checkpoint,
            split,
            exclude_unspecified,
            yates,
        } => commands::analyze(&data, checkpoint, split, exclude_unspecified, yates),
        Command::Gradcheck { variant, runs, seed } => commands::gradcheck(variant, runs, seed),
        Command::Kappa { first, second } => commands::kappa(&first, &second),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
