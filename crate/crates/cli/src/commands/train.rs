use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use kpdyn_core::autodiff::checkpoint;
use kpdyn_core::dynamics::{AblationFlags, ModelConfig};
use kpdyn_core::episode::config_hash;
use kpdyn_core::trainer::{encode_rollouts, train, TrainConfig};
use serde_json::json;

use crate::config::{write_atomic, Ctx};

use super::{check_hash, default_keypoints, load_dataset, load_detector};

#[derive(Parser)]
pub struct Args {
    /// Directory holding episode logs plus manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Detector backend: "geometric" or a detector checkpoint path.
    #[arg(long, default_value = "geometric")]
    detector: String,
    #[arg(long)]
    keypoints: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    margin: Option<f32>,
    /// Reward-loss weight (alpha).
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    unroll: Option<usize>,
    /// Comma-separated ablation flags: NoGraph,NoRNN,NoContrastive,InfoNCE,MaxPool.
    #[arg(long, default_value = "")]
    ablation: String,
    /// Allow mixing artifacts from different configurations.
    #[arg(long)]
    force: bool,
    /// Checkpoint path; defaults to `{out}/dynamics.ckpt`.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let (manifest, rollouts) = load_dataset(&args.data)?;
    let expected = config_hash(
        &ctx.sim,
        manifest.task,
        manifest.image_width,
        manifest.image_height,
    );
    check_hash(&expected, &manifest.config_hash, "dataset", args.force)?;

    let keypoints = args
        .keypoints
        .or(ctx.file.get_parsed("keypoints")?)
        .unwrap_or_else(|| default_keypoints(manifest.task));
    let backend = load_detector(&args.detector, keypoints)?;

    let ablation = AblationFlags::parse_list(&args.ablation).map_err(anyhow::Error::msg)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        context_len: args.context.unwrap_or(defaults.context_len),
        unroll_len: args.unroll.unwrap_or(defaults.unroll_len),
        negatives: args.negatives.unwrap_or(defaults.negatives),
        margin: args.margin.unwrap_or(defaults.margin),
        reward_weight: args.alpha.unwrap_or(defaults.reward_weight),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        lr: args.lr.unwrap_or(defaults.lr),
        ablation,
    };

    let encoded = encode_rollouts(&rollouts, &backend, keypoints)?;
    let model_cfg = ModelConfig::new(keypoints, backend.feat_dim());
    let outcome = train(&encoded, &cfg, model_cfg, ctx.seed)?;

    let out_path = args
        .model_out
        .unwrap_or_else(|| ctx.out_root.join("dynamics.ckpt"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let meta = json!({
        "namespace": "dynamics",
        "model": serde_json::to_value(outcome.params.cfg)?,
        "train": serde_json::to_value(cfg)?,
        "ablation": ablation.names(),
        "config_hash": manifest.config_hash,
        "detector": backend.kind(),
        "seed": ctx.seed,
    });
    checkpoint::save(&out_path, &outcome.params.store, &meta)
        .with_context(|| format!("writing {}", out_path.display()))?;

    let mut curve = String::from("epoch,l_d,l_r,l\n");
    for stats in &outcome.curve {
        curve.push_str(&format!(
            "{},{},{},{}\n",
            stats.epoch, stats.dynamics_loss, stats.reward_loss, stats.total
        ));
    }
    write_atomic(&out_path.with_file_name("curve.csv"), curve.as_bytes())?;
    println!(
        "dynamics checkpoint: {} (final loss {:.4})",
        out_path.display(),
        outcome.curve.last().map_or(f32::NAN, |s| s.total)
    );
    Ok(())
}
