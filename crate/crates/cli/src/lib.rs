//! The `gmn` command-line tool and HTTP counting service.

pub mod commands;
pub mod config;
pub mod server;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use gmn_core::model::TrainMode;

#[derive(Parser, Debug)]
#[command(name = "gmn", version, about = "Class-agnostic counting by exemplar matching")]
pub struct Cli {
    /// TOML or JSON file mirroring the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scenes or crowd textures with annotations.
    Synth(commands::SynthArgs),
    /// Train a fresh network on exemplar/search pairs.
    Pretrain(commands::TrainArgs),
    /// Train residual adapters and normalization terms of a checkpoint.
    Adapt(commands::TrainArgs),
    /// Count objects matching an exemplar box.
    Count(commands::CountArgs),
    /// Score detections against dot annotations.
    Eval(commands::EvalArgs),
    /// Tile images into count-labeled patches.
    CrowdQuantize(commands::CrowdQuantizeArgs),
    /// Train the same-class patch matcher.
    CrowdTrain(commands::CrowdTrainArgs),
    /// Count an image by classifying its tiles.
    CrowdCount(commands::CrowdCountArgs),
    /// Run the HTTP counting service.
    Serve(commands::ServeArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    use config::merge;
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Synth(a) => commands::synth(&merge(a, cfg, "synth")?),
        Command::Pretrain(a) => commands::train(&merge(a, cfg, "pretrain")?, TrainMode::Pretrain),
        Command::Adapt(a) => commands::train(&merge(a, cfg, "adapt")?, TrainMode::Adapt),
        Command::Count(a) => commands::count(&merge(a, cfg, "count")?),
        Command::Eval(a) => commands::eval(&merge(a, cfg, "eval")?),
        Command::CrowdQuantize(a) => commands::crowd_quantize(&merge(a, cfg, "crowd-quantize")?),
        Command::CrowdTrain(a) => commands::crowd_train(&merge(a, cfg, "crowd-train")?),
        Command::CrowdCount(a) => commands::crowd_count(&merge(a, cfg, "crowd-count")?),
        Command::Serve(a) => commands::serve(&merge(a, cfg, "serve")?),
    }
}
