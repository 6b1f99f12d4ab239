mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tweedie_embed::embeddings::ExportMode;
use tweedie_embed::trainer::OptimizerKind;

/// Word embeddings from a co-occurrence matrix by alternating Tweedie regression.
#[derive(Debug, Parser)]
#[command(name = "tweedie-embed", version)]
struct Cli {
    /// More log output (repeat for trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a frequency-ranked vocabulary from a corpus.
    Vocab(VocabArgs),
    /// Count windowed co-occurrences into a row store.
    Count(CountArgs),
    /// Per-row mean, variance and skewness of a store.
    Stats(StatsArgs),
    /// Fit the power and dispersion table from row moments.
    Dispersion(DispersionArgs),
    /// Fit embeddings to a store.
    Train(TrainArgs),
    /// Generate synthetic data and optionally compare optimizers on it.
    Simulate(SimulateArgs),
    /// Write trained vectors as text.
    Export(ExportArgs),
    /// Nearest tokens by cosine similarity.
    Neighbors(NeighborsArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Disable the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[command(flatten)]
    common: Common,
    /// Text corpus, one sentence per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output vocabulary (`token<TAB>count` per line).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_count: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output store.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum token distance counted.
    #[arg(long)]
    window: Option<usize>,
    /// Row-range shards counted one after another.
    #[arg(long)]
    shards: Option<usize>,
    /// Accumulator entries held before spilling a sorted run to disk.
    #[arg(long)]
    spill_threshold: Option<usize>,
    /// Store `ln(1 + x)` instead of raw weights.
    #[arg(long)]
    log1p: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compute moments of `ln(1 + x)`.
    #[arg(long)]
    log1p: bool,
}

#[derive(Debug, Args)]
pub struct DispersionArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Output table CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-index assignment used by `train`.
    #[arg(long)]
    assignment_out: Option<PathBuf>,
    /// Comma-separated log-mean breakpoints; unit intervals by default.
    #[arg(long, allow_hyphen_values = true)]
    breakpoints: Option<String>,
    #[arg(long)]
    log1p: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Starting learning rate of the adjusted Fisher step.
    #[arg(long)]
    lr: Option<f64>,
    /// Use the plain Fisher step even with `fisher_lr`.
    #[arg(long)]
    no_lr_adjust: bool,
    #[arg(long)]
    n_epoch: Option<u32>,
    #[arg(long)]
    num_chunks: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    maxit: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial values are Uniform(-r, r).
    #[arg(long)]
    init_range: Option<f64>,
    /// Keep the biases at their initial values.
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    adam_step: Option<f64>,
    /// Keep Adam's step size fixed.
    #[arg(long)]
    no_plateau: bool,
    /// Train on `ln(1 + x)`.
    #[arg(long)]
    log1p: bool,
    /// Per-index power and dispersion (from `dispersion --assignment-out`).
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Constant power when no assignment is given.
    #[arg(long)]
    power: Option<f64>,
    /// Constant dispersion when no assignment is given.
    #[arg(long)]
    phi: Option<f64>,
    /// History CSV, rewritten after every iteration.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Checkpoint written after every iteration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Record wall-clock seconds in the history.
    #[arg(long)]
    timing: bool,
    /// Fetch rows on the training thread.
    #[arg(long)]
    no_prefetch: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Text vectors to normalize instead of random directions.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Directory receiving `data.store`, `truth.ckpt` and `assignment.csv`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Train fisher, fisher_lr and adam from a shared start and write their trajectories.
    #[arg(long)]
    compare: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_epoch: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    maxit: Option<u64>,
    #[arg(long)]
    init_range: Option<f64>,
    #[arg(long)]
    adam_step: Option<f64>,
    #[arg(long)]
    no_bias: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    export_mode: Option<ExportMode>,
}

#[derive(Debug, Args)]
pub struct NeighborsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Number of neighbours.
    #[arg(long)]
    k: Option<usize>,
    query: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Vocab(a) => commands::vocab(a),
        Command::Count(a) => commands::count(a),
        Command::Stats(a) => commands::stats(a),
        Command::Dispersion(a) => commands::dispersion(a),
        Command::Train(a) => commands::train(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Export(a) => commands::export(a),
        Command::Neighbors(a) => commands::neighbors(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<config::ConfigError>().is_some()
                || e.downcast_ref::<commands::UsageError>().is_some()
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
