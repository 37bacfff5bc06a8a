//! `glfcr`: synthesize data, train, evaluate and run inference.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort
//! (non-finite loss).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Preset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint/config mismatch in field `{field}`: checkpoint has {checkpoint}, requested {requested}")]
    Mismatch {
        field: String,
        checkpoint: String,
        requested: String,
    },
    #[error(transparent)]
    Lib(#[from] glfcr::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(glfcr::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "glfcr", version, about = "SAR-guided cloud removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired-scene dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score predictions on a dataset and write binned reports.
    Eval(EvalArgs),
    /// Predict one scene from a checkpoint.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value file with any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Scene side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Cloud coverage target (lower end when --coverage-max is given).
    #[arg(long)]
    pub coverage: Option<f64>,
    /// Draw each scene's coverage uniformly from [--coverage, --coverage-max].
    #[arg(long)]
    pub coverage_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bands: Option<usize>,
    /// Speckle looks (gamma shape).
    #[arg(long)]
    pub looks: Option<f64>,
    /// Soft cloud edge width.
    #[arg(long)]
    pub softness: Option<f64>,
}

/// Architecture overrides; each mirrors a config-file key.
#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// full, no_sar, concat, no_stl, no_gf or no_df.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dense: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub filter: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub shift: Option<bool>,
}

impl ModelArgs {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                p.push((k.to_string(), v));
            }
        };
        push("variant", self.variant.clone());
        push("bands", self.bands.map(|v| v.to_string()));
        push("channels", self.channels.map(|v| v.to_string()));
        push("blocks", self.blocks.map(|v| v.to_string()));
        push("dense", self.dense.map(|v| v.to_string()));
        push("window", self.window.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        push("filter", self.filter.map(|v| v.to_string()));
        push("mlp_ratio", self.mlp_ratio.map(|v| v.to_string()));
        push("shift", self.shift.map(|v| v.to_string()));
        p
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (see `synth`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the manifest, trace and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub dtype: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Report mean validation L1 on this dataset after training.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

impl TrainArgs {
    fn flag_pairs(&self) -> Vec<(String, String)> {
        let mut p = self.model.pairs();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                p.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("crop", self.crop.map(|v| v.to_string()));
        push("lr0", self.lr0.map(|v| v.to_string()));
        push("clip", self.clip.map(|v| v.to_string()));
        push("samples_per_epoch", self.samples_per_epoch.map(|v| v.to_string()));
        push("dtype", self.dtype.clone());
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    /// Model predictions from --checkpoint.
    Model,
    /// The cloudy input itself.
    Cloudy,
    /// The cloud-free reference (self-evaluation).
    Truth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub source: Source,
    /// Comma-separated band indices to score (default: all).
    #[arg(long, value_delimiter = ',')]
    pub bands_subset: Option<Vec<usize>>,
    /// Also write each prediction as GTNS under `predictions/`.
    #[arg(long)]
    pub dump_predictions: bool,
    /// Expected configuration; checked against the checkpoint when given.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub dtype: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cloudy optical GTNS, `[bands, H, W]` or `[1, bands, H, W]`.
    #[arg(long)]
    pub cloudy: PathBuf,
    /// SAR GTNS, `[2, H, W]` or `[1, 2, H, W]`.
    #[arg(long)]
    pub sar: Option<PathBuf>,
    /// Cloud-free reference; metrics are printed when given.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub bands_subset: Option<Vec<usize>>,
    /// Expected variant; checked against the checkpoint when given.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub dtype: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
