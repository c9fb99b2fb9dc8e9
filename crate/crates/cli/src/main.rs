//! `loftup` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] loftup_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) | CliError::Core(_) => 2,
        }
    }
}

/// Upsampler names accepted on the command line.
pub const UPSAMPLERS: [&str; 5] = ["loftup", "resize-conv", "local-implicit", "bilinear", "bicubic"];

#[derive(Debug, Parser)]
#[command(name = "loftup", version, about = "Coordinate-based feature upsampling for frozen vision backbones")]
pub struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset
    SynthData(SynthArgs),
    /// Train on mask-refined bicubic targets
    TrainStage1(TrainArgs),
    /// Self-distill from a stage-1 checkpoint
    TrainStage2(TrainArgs),
    /// Upsample one image's backbone features to a feature sidecar
    Upsample(UpsampleArgs),
    /// Linear-probe segmentation mIoU on a dataset with class maps
    Probe(ProbeArgs),
    /// Render upsampled features as a PCA image
    Visualize(VisualizeArgs),
    /// Parameter count and forward latency of an upsampler
    Bench(BenchArgs),
    /// Convert an RLE annotation file into a 16-bit label map
    ImportRle(ImportRleArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Image side length
    #[arg(long, default_value_t = 64)]
    pub res: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to start from (required for stage 2)
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output checkpoint directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer steps; overrides --epochs
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = UPSAMPLERS)]
    pub upsampler: Option<String>,
    /// Metrics log (defaults to metrics.jsonl in the output directory)
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_parser = UPSAMPLERS)]
    pub upsampler: Option<String>,
    #[arg(long)]
    pub image: PathBuf,
    /// Precomputed low-res features to use instead of the toy backbone
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output side length (defaults to the image size)
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Feature source: an upsampler name or `lowres`
    #[arg(long)]
    pub upsampler: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probe training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fraction of images held out for testing
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    /// Results log to append to
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_parser = UPSAMPLERS)]
    pub upsampler: Option<String>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_parser = UPSAMPLERS)]
    pub upsampler: String,
    /// Input side length
    #[arg(long, default_value_t = 224)]
    pub res: usize,
    /// Output side length (defaults to --res)
    #[arg(long)]
    pub out_res: Option<usize>,
    /// Feature channels (defaults to the backbone's)
    #[arg(long)]
    pub channels: Option<usize>,
    /// Timed repeats
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Results log to append to
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportRleArgs {
    #[arg(long)]
    pub json: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
