//! `getnet`: dataset generation, training, evaluation, ROI export and the
//! gradient-check suite.
//!
//! Exit codes: 0 success, 2 validation or format error, 3 I/O error,
//! 4 numeric abort, 5 gradient-check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "getnet", version, about = "Spatial-transformer Siamese pairing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Paste MNIST digits onto cluttered 60x60 canvases and write a dataset directory.
    GenDistorted(GenArgs),
    /// Train a model on a pair file.
    Train(TrainArgs),
    /// Score a checkpoint on a pair file.
    Eval(EvalArgs),
    /// Write transformer crops and their source boxes for a set of images.
    ExportRoi(ExportArgs),
    /// Compare every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub mnist_images: PathBuf,
    #[arg(long)]
    pub mnist_labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated digit classes to keep.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
}

#[derive(Args, Default)]
pub struct TrainArgs {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Pair file inside a dataset directory (its `pairs.csv`), or the directory itself.
    #[arg(long, alias = "data")]
    pub pairs: Option<PathBuf>,
    /// Output directory for metrics.csv and the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// 32 or 64.
    #[arg(long)]
    pub precision: Option<u32>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub locnet_lr_scale: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stn_only_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pair file, or a dataset directory holding one.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Fixed decision threshold; fitted on the pairs when absent.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory, IDX image file, or folder of class subfolders.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 64)]
    pub precision: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Scale one component's analytic gradient by 1.01.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// A failed command: the exit code and the message for standard error.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<getnet_core::Error> for Failure {
    fn from(e: getnet_core::Error) -> Self {
        use getnet_core::Error::*;
        let code = match &e {
            Io(_) => 3,
            Numeric(_) => 4,
            Dimension(_) | EmptyBatch(_) | Format { .. } | Config(_) => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 3, message: e.to_string() }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("GETNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::invalid(format!("GETNET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::invalid(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenDistorted(a) => commands::gen_distorted(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::ExportRoi(a) => commands::export_roi(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
