//! `medvkan` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// MedVKAN segmentation: data synthesis, training, evaluation and checks.
#[derive(Parser, Debug)]
#[command(name = "medvkan", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Output {
    /// Directory for result.json and any artifacts.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Image side length (multiple of 32).
        #[arg(long)]
        size: usize,
        /// Class count including background.
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Train a model on a manifest.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Surface-distance tolerance in pixels.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Predict a label map for one image tensor.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// f32 `.vkt` image, H×W, C×H×W or B×C×H×W.
        #[arg(long)]
        image: PathBuf,
        /// Where to write the u8 label tensor [default: <out>/labels.vkt].
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Run the f64 gradient-check suites.
    Gradcheck {
        /// all, tensor, scan, kan, cbam, losses or net.
        #[arg(long, default_value = "all")]
        module: String,
        #[command(flatten)]
        output: Output,
    },
    /// Time the naive and blocked selective scans and compare them.
    BenchScan(commands::BenchArgs),
    /// Print the trainable parameter breakdown of a model config.
    Params {
        /// Model config JSON (a bare model config or a run config with a "model" key).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset used when no config is given.
        #[arg(long, default_value = "full")]
        preset: String,
        #[arg(long, default_value_t = 3)]
        in_channels: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[command(flatten)]
        output: Output,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
