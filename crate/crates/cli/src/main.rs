//! `wavec2r`: synthetic data, two-stage training, retrieval, evaluation and
//! figures from the command line.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wavec2r::Error;

/// Exit status for each failure class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const VALIDATION: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const IO: u8 = 5;
    pub const CORRUPT: u8 = 6;
    pub const PARTIAL: u8 = 7;
}

#[derive(Parser, Debug)]
#[command(name = "wavec2r", version, about = "Two-stage satellite-to-radar retrieval")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic event archive.
    MakeData(MakeDataArgs),
    /// Train one stage and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Write per-event predictions for an archive.
    Retrieve(RetrieveArgs),
    /// Score predictions against the targets of an archive.
    Evaluate(EvaluateArgs),
    /// Render prediction panels or a score chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Where checkpoints, logs and the config snapshot go.
    #[arg(long, env = "WAVEC2R_CHECKPOINT_DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Stage-I checkpoint for `--stage 2`; defaults to `stage1.ckpt` in the checkpoint directory.
    #[arg(long)]
    pub stage1_checkpoint: Option<PathBuf>,
    /// Train from this archive instead of the configured source.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Output directory for `<id>.wct` prediction files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "WAVEC2R_CHECKPOINT_DIR")]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub stage1_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub stage2_checkpoint: Option<PathBuf>,
    /// Emit the Stage-I estimate μ instead of the refined field.
    #[arg(long)]
    pub coarse_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    /// Restrict to these event ids.
    #[arg(long, num_args = 1..)]
    pub ids: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of `<id>.wct` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub archive: PathBuf,
    /// Output directory for `report.txt` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, num_args = 1..)]
    pub ids: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Render a per-threshold score chart from a `report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Archive holding inputs and targets for event panels.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Directory of refined predictions.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of coarse predictions.
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub ids: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Dimension(_) | Error::EventNotFound { .. } | Error::MissingModality { .. } => {
            exit::VALIDATION
        }
        Error::Config(_) => exit::CONFIG,
        Error::Io { .. } => exit::IO,
        Error::Corrupt { .. } => exit::CORRUPT,
        Error::NonFinite { .. } | Error::Tensor(_) => exit::INTERNAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::load_config(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::MakeData(a) => commands::make_data(cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Retrieve(a) => commands::retrieve(cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Plot(a) => commands::plot(&a),
    });
    match result {
        Ok(commands::Status::Complete) => ExitCode::from(exit::OK),
        Ok(commands::Status::Partial(n)) => {
            eprintln!("error: {n} event(s) failed");
            ExitCode::from(exit::PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
