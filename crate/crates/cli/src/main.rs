//! `cad`: build benchmarks, train scorers, evaluate them and run the
//! numeric oracles.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
//! usage, 3 unreadable or inconsistent data, 4 oracle failure.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ModelKind;
use crate::failure::exit_code;

#[derive(Debug, Parser)]
#[command(name = "cad", version, about = "Collaborative anomaly detection experiments")]
struct Cli {
    /// Run seed. Overrides any seed from a configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log progress at info level (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-task Gaussian-blob benchmark.
    Synth(SynthArgs),
    /// Turn an exposure log and a user table into a benchmark.
    Ingest(IngestArgs),
    /// Train a ratio model or a density baseline on a benchmark.
    Train(TrainArgs),
    /// Score a benchmark's test sets with a trained model.
    Eval(EvalArgs),
    /// Run the self-contained correctness oracles.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of label categories.
    #[arg(long = "L")]
    categories: Option<usize>,
    /// Active categories per task.
    #[arg(long)]
    k: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Samples per category before the test split.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    stddev: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// TOML file with generator settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// CSV with header `user_id,item_id`.
    #[arg(long)]
    events: PathBuf,
    /// CSV with header `user_id,label:<key>...,f_0...`.
    #[arg(long)]
    users: PathBuf,
    /// Label used for filtering and for nominal/anomalous test users.
    #[arg(long, default_value = "age")]
    label: String,
    #[arg(long, default_value_t = 100)]
    min_exposures: usize,
    #[arg(long, default_value_t = 0.5)]
    keep_fraction: f64,
    /// Share of users assigned to training.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// Seed of the user split; defaults to `--seed`, then 0.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Benchmark directory.
    #[arg(long)]
    benchmark: PathBuf,
    /// TOML run configuration (for example a previous `resolved_config.toml`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// random, learned, histogram, label or pseudo.
    #[arg(long)]
    init: Option<String>,
    /// Number of seed tasks for learned initialization.
    #[arg(long)]
    m0: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Dropout rates per hidden layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    dropout: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Training output directory (or its checkpoint.json).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Benchmark the model was trained on.
    #[arg(long)]
    benchmark: PathBuf,
    /// Report name; defaults to the model and initializer.
    #[arg(long)]
    experiment: Option<String>,
    /// Score the unseen tasks of `--test-benchmark` with the frozen models.
    #[arg(long, requires = "test_benchmark")]
    generalize: bool,
    #[arg(long)]
    test_benchmark: Option<PathBuf>,
    /// Also write the cosine-similarity matrix of the task embeddings.
    #[arg(long)]
    emit_similarity: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum OracleKind {
    All,
    Prop1,
    Gradcheck,
    Ratio,
    Flow,
    Auc,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = OracleKind::All)]
    oracle: OracleKind,
    /// Instances per oracle (base-optimality instances, networks, score sets).
    #[arg(long)]
    trials: Option<usize>,
    /// Positive/negative pairs for the ratio-recovery oracle.
    #[arg(long, default_value_t = 50_000)]
    pairs: usize,
    /// Directory for `verify_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Synth(args) => commands::synth(args, cli.seed),
        Command::Ingest(args) => commands::ingest(args, cli.seed),
        Command::Train(args) => commands::train(args, cli.seed),
        Command::Eval(args) => commands::eval(args, cli.seed),
        Command::Verify(args) => commands::verify(args, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
