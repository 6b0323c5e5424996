//! The `mhc` command-line tool: training, analyses and figure rendering.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 non-finite numerics.

mod commands;
mod manifest;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use manifest::{sha256_hex, OutputDir, RunManifest};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::similarity::DEFAULT_POSITIONS;
use crate::training::TrainConfig;

/// Default byte count of the generated corpus when no file is given.
pub const DEFAULT_SYNTHETIC_BYTES: usize = 400_000;
/// Default number of prompts (or prompt pairs) per experiment.
pub const DEFAULT_PROMPTS: usize = 32;

/// Top-level config file. Field names mirror the library types; missing
/// fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// UTF-8 text corpus; the built-in synthetic corpus when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    /// Master seed; sub-seeds for init, data, sampling and prompts derive from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: None,
            synthetic_bytes: DEFAULT_SYNTHETIC_BYTES,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("config {}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mhc",
    version,
    about = "Train and analyze multi-stream hyper-connected transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write `model.mhck` plus the loss curve.
    Train(TrainArgs),
    /// Within-layer and inter-layer CKA of stream residuals.
    Cka(CkaArgs),
    /// Counterfactual activation patching heatmap.
    Patch(ExperimentArgs),
    /// Ablation-and-rescue matrices and asymmetry curves.
    Rescue(ExperimentArgs),
    /// Depth-wise routing statistics.
    Hstats(HstatsArgs),
    /// Run every analysis on one checkpoint into one directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed (overrides the config file's seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file (overrides the config file).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config used to rebuild the training corpus and its held-out split.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sampled token positions.
    #[arg(long, default_value_t = DEFAULT_POSITIONS)]
    pub samples: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment spec JSON: {layers, stream_pairs, prompt_count, seed, mode}.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct HstatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_POSITIONS)]
    pub samples: usize,
    /// Prompts (and prompt pairs) per experiment.
    #[arg(long, default_value_t = DEFAULT_PROMPTS)]
    pub prompts: usize,
    #[command(flatten)]
    pub common: Common,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::Numeric(_) | Error::UndefinedSimilarity(_) => 4,
        _ => 2,
    }
}

/// Parse arguments, run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
