//! Command-line driver: dataset preparation, training, threshold
//! optimisation, evaluation, single-image detection and report-only metrics.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::{run, report_rows};
pub use config::{EvaluationConfig, Overrides, PrepareConfig, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, paths or inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Training produced a non-finite loss or gradient. Exit code 3.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<leafdet_core::error::Error> for CliError {
    fn from(e: leafdet_core::error::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

const PRECEDENCE: &str = "\
Settings are resolved as: command-line flags > --config JSON file > built-in defaults.
Exit codes: 0 success, 2 usage or validation error, 3 training divergence.
LEAFDET_THREADS caps the number of worker threads.";

#[derive(Debug, Parser)]
#[command(name = "leafdet", version, about = "Leaf-disease region detector", after_help = PRECEDENCE)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration (unknown keys are rejected).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for the split and for training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Epochs per training step.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Also evaluate on Gaussian-blurred copies with this sigma.
    #[arg(long, global = true)]
    pub blur_sigma: Option<f32>,
    /// Replace an existing prepared corpus.
    #[arg(long, global = true)]
    pub force: bool,
    /// Detection CSV to reuse when present, or to write otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    pub cache_detections: Option<PathBuf>,
    /// Corpus root.
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Weight file (default `<output>/model.ircn`).
    #[arg(long, global = true, value_name = "PATH")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write images, XML annotations and the split manifest (synthetic or copied).
    Prepare,
    /// Run the four-step alternating schedule on the training split.
    Train,
    /// Sweep score thresholds 0.1..0.9 per class on the validation split.
    Optimize,
    /// Metrics, confusion matrix and PR-curve data on the test split.
    Evaluate,
    /// Detect objects in one image and print `class score x1 y1 x2 y2` lines.
    Detect {
        image: PathBuf,
        /// Threshold table from `optimize`.
        #[arg(long, value_name = "PATH")]
        thresholds: Option<PathBuf>,
        /// Detection CSV (default `<output>/<image stem>_detections.csv`).
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
        /// Write a copy of the image with the boxes drawn in, as PPM.
        #[arg(long, value_name = "PATH")]
        annotate: Option<PathBuf>,
    },
    /// Precision, recall and F2 from a `class,tp,fp,fn` CSV.
    Report {
        #[arg(long, value_name = "PATH")]
        counts: PathBuf,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            blur_sigma: self.blur_sigma,
            dataset: self.dataset.clone(),
            output: self.output.clone(),
            weights: self.weights.clone(),
        }
    }
}
