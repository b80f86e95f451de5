//! `dloseg`: train, evaluate and run the cable segmentation adapter.

mod commands;
mod manifest;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dloseg::Error;

#[derive(Parser)]
#[command(name = "dloseg", version, about = "Text-promptable instance segmentation of cables and wires")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "DLOSEG_LOG", default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an adapter and write checkpoints, logs and a manifest into a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one image with a checkpoint.
    Infer(InferArgs),
    /// Generate a procedural dataset in the on-disk training format.
    Fixtures(FixturesArgs),
    /// Check a dataset tree and list its defects.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BackboneArg {
    Stub,
    Real,
}

impl BackboneArg {
    fn as_str(self) -> &'static str {
        match self {
            Self::Stub => "stub",
            Self::Real => "real",
        }
    }
}

#[derive(Args)]
pub struct ConfigArgs {
    /// JSON configuration file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dotted-key override such as `optimizer.weight_decay=0.02` (repeatable).
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Backbone implementation.
    #[arg(long)]
    backbones: Option<BackboneArg>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,

    /// Run directory for checkpoints, logs and the manifest.
    #[arg(long, env = "DLOSEG_RUN_DIR")]
    run_dir: PathBuf,

    /// Dataset root (shorthand for `--set data.root=...`).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Epoch count; the warmup keeps its default share of the schedule.
    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// Stop after this many optimizer steps; the run stays resumable.
    #[arg(long)]
    max_steps: Option<u64>,

    /// Continue from the state saved in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,

    #[arg(long, env = "DLOSEG_CHECKPOINT")]
    checkpoint: PathBuf,

    #[arg(long)]
    data: PathBuf,

    #[arg(long, default_value = "test")]
    split: String,

    /// Filter masks by ground-truth matching instead of the classifier.
    #[arg(long)]
    oracle: bool,

    /// Output directory for the report and manifest.
    #[arg(long)]
    out: PathBuf,

    /// Text prompt; defaults to the one stored with the checkpoint.
    #[arg(long)]
    text: Option<String>,

    /// Keep threshold on classifier probabilities.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    image: PathBuf,

    #[arg(long, default_value = "cables")]
    text: String,

    #[arg(long, env = "DLOSEG_CHECKPOINT")]
    checkpoint: PathBuf,

    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
pub struct FixturesArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 7)]
    seed: u64,

    /// Images per split.
    #[arg(long, default_value_t = 3)]
    n: usize,

    /// Image side length in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,

    /// Splits to generate; each split draws from its own seed offset.
    #[arg(long = "split", default_values_t = vec!["train".to_string()])]
    splits: Vec<String>,
}

#[derive(Args)]
pub struct ValidateArgs {
    #[arg(long)]
    root: PathBuf,

    /// Directory for the JSON report and manifest (defaults to the root).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Exit with status 2 when any error-level defect is found.
    #[arg(long)]
    strict: bool,
}

/// Stable exit status for scripts.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::CheckpointMismatch(_) => 3,
        Error::Io { .. } | Error::Image { .. } | Error::Tensor(_) | Error::Serde(_) => 4,
        Error::Config(_)
        | Error::Shape { .. }
        | Error::InvalidArgument(_)
        | Error::Record { .. }
        | Error::Backbone(_)
        | Error::NonFiniteLoss { .. } => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Train(a) => commands::train(a, &args),
        Command::Eval(a) => commands::eval(a, &args),
        Command::Infer(a) => commands::infer(a, &args),
        Command::Fixtures(a) => commands::fixtures(a, &args),
        Command::Validate(a) => commands::validate(a, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
