//! `fscascade`: generate synthetic data, train cascade variants, evaluate
//! them and emit diagnostic tables.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
//! Output directories default to `$FSCASCADE_OUT` (or `fscascade-out`) when
//! not given on the command line.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fscascade::eval::InferenceMode;
use fscascade::model::Variant;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FSCASCADE_OUT";

#[derive(Debug, Parser)]
#[command(name = "fscascade", version, about = "Feature-sharing cascade detection heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one variant and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run (or a detection dump) and print its AP row.
    Eval(EvalArgs),
    /// Stage-gap tables and confidence histograms for one or more runs.
    Diagnose(DiagnoseArgs),
    /// Per-component parameter counts for every variant.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Target directory [default: $FSCASCADE_OUT/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub objects_min: usize,
    #[arg(long, default_value_t = 4)]
    pub objects_max: usize,
    /// Smallest object side as a fraction of the image side.
    #[arg(long, default_value_t = 0.15)]
    pub size_min: f64,
    #[arg(long, default_value_t = 0.4)]
    pub size_max: f64,
    #[arg(long, default_value_t = 0.2)]
    pub max_gt_iou: f64,
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stages: u8,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent of the run directory [default: $FSCASCADE_OUT/runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name [default: <variant>-<stages>s-seed<seed>, suffixed if taken].
    #[arg(long)]
    pub run_id: Option<String>,
    /// TOML file with `[model]` and/or `[training]` tables; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Backbone and box-trunk channel count.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Width of the classification FC layers.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub rois: Option<usize>,
    /// Learning-rate decay epochs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, required_unless_present = "detections")]
    pub run: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode, default_value = "stage3")]
    pub mode: InferenceMode,
    #[arg(long)]
    pub data: PathBuf,
    /// Score an existing detection dump instead of running a model.
    #[arg(long, conflicts_with = "run")]
    pub detections: Option<PathBuf>,
    /// Where to write the AP row [default: <run>/eval-<mode>.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Run directories; the first is the reference for cross-run gaps.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory [default: $FSCASCADE_OUT/diagnose].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou_low: f64,
    #[arg(long, default_value_t = 0.75)]
    pub iou_high: f64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model config TOML (a bare model table or a run config with `[model]`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stages: Option<u8>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|_| format!("expected one of baseline, cfs, lfs, fscascade; got `{s}`"))
}

fn parse_mode(s: &str) -> Result<InferenceMode, String> {
    s.parse().map_err(|_| format!("expected stage1, stage2, stage3 or ensemble; got `{s}`"))
}

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<fscascade::Error>() {
            Some(fscascade::Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<fscascade::Error> for Failure {
    fn from(e: fscascade::Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Params(a) => commands::params(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
