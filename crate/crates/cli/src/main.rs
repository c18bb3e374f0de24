//! `kpdyn`: collect episodes, train the detector and dynamics model,
//! evaluate, plan single actions, and render episode logs.

mod commands;
mod config;
mod draw;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::Ctx;

#[derive(Parser)]
#[command(
    name = "kpdyn",
    version,
    about = "Keypoint graph dynamics for deformable-object manipulation"
)]
struct Cli {
    /// Master seed for every randomized stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Key=value configuration file (see README).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; falls back to $KPDYN_OUT, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write episode logs plus a manifest.
    Collect(commands::collect::Args),
    /// Train the transporter keypoint detector on collected logs.
    TrainDetector(commands::train_detector::Args),
    /// Train the recurrent graph dynamics model on collected logs.
    Train(commands::train::Args),
    /// Evaluate a trained model: top-1 accuracy and closed-loop success.
    Eval(commands::eval::Args),
    /// Plan a single action from a log frame or a fresh reset.
    Plan(commands::plan::Args),
    /// Render an episode log to PNG frames and an animated GIF.
    Render(commands::render::Args),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = Ctx::resolve(cli.seed, cli.config, cli.out)?;
    match cli.command {
        Command::Collect(args) => commands::collect::run(&ctx, args),
        Command::TrainDetector(args) => commands::train_detector::run(&ctx, args),
        Command::Train(args) => commands::train::run(&ctx, args),
        Command::Eval(args) => commands::eval::run(&ctx, args),
        Command::Plan(args) => commands::plan::run(&ctx, args),
        Command::Render(args) => commands::render::run(&ctx, args),
    }
}
