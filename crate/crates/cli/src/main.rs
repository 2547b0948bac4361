//! `ehdr`: event-guided multi-bracket HDR from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or runtime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ehdr", version, about = "Event-guided multi-bracket HDR imaging")]
pub struct Cli {
    /// Seed for every random choice; equal seeds give identical numeric outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// INI configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate events from a frame directory, or render synthetic captures.
    Simulate(SimulateArgs),
    /// Render exposure brackets of an HDR image.
    Brackets(BracketsArgs),
    /// Triangle-weighted merge of exposure brackets.
    MergeHdr(MergeArgs),
    /// μ-law tonemap an HDR image to PNG.
    Tonemap(TonemapArgs),
    /// Train a model on a directory of captures or on synthetic scenes.
    Train(TrainArgs),
    /// Reconstruct the HDR image of one capture.
    Infer(InferArgs),
    /// Score a model (or the naive merge) on a directory of captures.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck,
    /// End-to-end smoke test on a synthetic scene.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory with `manifest.txt` (`frame_idx timestamp_us file.pfm`) and PFM frames.
    /// Without it, synthetic captures are rendered.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Number of synthetic captures.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Contrast threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Calibrate the threshold to this many events per frame interval.
    #[arg(long, conflicts_with = "threshold")]
    pub target_rate: Option<f64>,
    /// Object speed in pixels per frame (synthetic captures).
    #[arg(long)]
    pub speed: Option<f32>,
    /// Render brackets without sensor noise (synthetic captures).
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Args, Debug)]
pub struct BracketsArgs {
    /// Linear HDR image (PFM).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated f-stops, exactly one of them 0.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,0,3")]
    pub fstops: Vec<i32>,
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Bracket PNGs, each with a `.txt` exposure sidecar.
    #[arg(long = "in", num_args = 2.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Merged HDR image (PFM).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TonemapArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ehdr_core::hdr::MU)]
    pub mu: f32,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of capture sub-directories (see `simulate`).
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many synthetic captures instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Output directory for the checkpoint and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_halving_period: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Capture directory (brackets, sidecars, events).
    #[arg(long)]
    pub capture: PathBuf,
    /// Output directory for `prediction.pfm` and its tonemapped `prediction.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model to score; without it the naive merge of the brackets is scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Pixels cropped from each border before scoring.
    #[arg(long, default_value_t = 10)]
    pub border: usize,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Where to keep the intermediate files; nothing is written without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
