use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Spatio-temporal forecaster with self-supervised deviation learning.
#[derive(Parser, Debug)]
#[command(name = "stssdl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with weekly periodicity and deviation events.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        weeks: usize,
        /// low, medium or high
        #[arg(long)]
        deviation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = stssdl::data::GenConfig::DEFAULT_STEPS_PER_DAY)]
        steps_per_day: usize,
    },
    /// Train a model and write its checkpoint and history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-horizon metrics of a checkpoint and of the HI baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the metrics file (defaults to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prediction, anchor and ground truth for one window.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Absolute timestep of the first input step.
        #[arg(long)]
        window_start: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prototype exports: patterns, pca or assignments.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of sampled queries for `pca`.
        #[arg(long, default_value_t = 400)]
        sample: usize,
        /// Keep queries of the k most used prototypes for `pca` (0 keeps all).
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// full, no-con, no-dev, no-both, no-ssdl or naive; all six when omitted.
        #[arg(long)]
        variant: Option<String>,
        /// Output directory (defaults to `out_dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
