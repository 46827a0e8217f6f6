//! Batch command-line surface for the pipeline: feature extraction,
//! synthetic data, training, animation, and lip metrics. Every command is
//! deterministic given its flags and the base seed.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "voca", version, about = "Speech-driven 3D facial animation toolkit")]
struct Cli {
    /// Config file of key = value lines in [net]/[train]/[audio]/[anim]
    /// sections; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every random component derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract or import acoustic features and write a feature container.
    Features(commands::FeaturesArgs),
    /// Generate a deterministic synthetic dataset directory.
    Synth(commands::SynthArgs),
    /// Train on a dataset directory and write the best checkpoint.
    Train(commands::TrainArgs),
    /// Animate a template from features using a trained checkpoint.
    Animate(commands::AnimateArgs),
    /// Measure the lip gap of a mesh sequence and write a csv.
    Metrics(commands::MetricsArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("VOCA_THREADS") {
        let n: usize = threads
            .parse()
            .context("VOCA_THREADS must be a positive thread count")?;
        if n == 0 {
            anyhow::bail!("VOCA_THREADS must be a positive thread count");
        }
        // Ignore the error if a pool already exists; only the cap matters.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = config::FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Features(args) => commands::features(args, &cfg),
        Command::Synth(args) => commands::synth(args, cli.seed),
        Command::Train(args) => commands::train_cmd(args, &cfg, cli.seed),
        Command::Animate(args) => commands::animate_cmd(args, &cfg),
        Command::Metrics(args) => commands::metrics(args, &cfg),
    }
}
