//! `vmae`: dataset generation, pre-training, ablations, evaluation and reconstruction dumps.

mod commands;
mod config;
mod error;
mod lock;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "vmae", version, about = "Masked-autoencoder pre-training with edge and text priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic vehicle dataset with a manifest.
    GenData(GenDataArgs),
    /// Pre-train from a config.
    Pretrain(PretrainArgs),
    /// Run the loss-toggle grid and the mask-ratio sweep.
    Ablate(AblateArgs),
    /// Score a checkpoint, a prediction dump or a confusion matrix.
    Eval(EvalArgs),
    /// Write an original / masked / reconstructed / error panel image.
    Reconstruct(ReconstructArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    caption_frac: f64,
    #[arg(long, default_value_t = 4)]
    images_per_identity: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// YAML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (with manifest.tsv, or a plain image folder) or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Remove a leftover run.lock before starting.
    #[arg(long)]
    break_lock: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from last.vmae in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after_epoch: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    Loss,
    Ratio,
    All,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = Grid::All)]
    grid: Grid,
    /// Also linear-probe every cell on the attribute task.
    #[arg(long)]
    probe: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Attribute,
    FineGrained,
    Retrieval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Probe,
    Finetune,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, requires_all = ["data", "task"], conflicts_with_all = ["predictions", "confusion"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long, value_enum, default_value_t = Mode::Probe)]
    mode: Mode,
    /// Probe settings come from this run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-score a prediction dump.
    #[arg(long, conflicts_with = "confusion")]
    predictions: Option<PathBuf>,
    /// Segmentation confusion matrix, whitespace separated.
    #[arg(long)]
    confusion: Option<PathBuf>,
    /// Decision threshold for attribute predictions.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Rank cutoffs for retrieval.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump held-out scores for external re-scoring.
    #[arg(long)]
    dump_predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the checkpoint's training ratio.
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
