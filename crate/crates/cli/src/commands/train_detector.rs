use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use kpdyn_core::autodiff::checkpoint;
use kpdyn_core::keypoint::{train_detector, DetectorParams};
use serde_json::json;

use crate::config::{write_atomic, Ctx};

use super::{default_keypoints, load_dataset};

#[derive(Parser)]
pub struct Args {
    /// Directory holding episode logs plus manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    keypoints: Option<usize>,
    /// Checkpoint path; defaults to `{out}/detector.ckpt`.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let (manifest, rollouts) = load_dataset(&args.data)?;
    let keypoints = args
        .keypoints
        .or(ctx.file.get_parsed("keypoints")?)
        .unwrap_or_else(|| default_keypoints(manifest.task));
    let epochs = args
        .epochs
        .or(ctx.file.get_parsed("detector.epochs")?)
        .unwrap_or(4);
    let lr = args
        .lr
        .or(ctx.file.get_parsed("detector.lr")?)
        .unwrap_or(1e-3);

    let params = DetectorParams::init(keypoints, ctx.seed);
    let (params, report) = train_detector(&rollouts, params, epochs, lr, ctx.seed)?;

    let out_path = args
        .model_out
        .unwrap_or_else(|| ctx.out_root.join("detector.ckpt"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let meta = json!({
        "namespace": "detector",
        "keypoints": keypoints,
        "feat_channels": params.feat_channels,
        "config_hash": manifest.config_hash,
        "epochs": epochs,
        "lr": lr,
        "seed": ctx.seed,
    });
    checkpoint::save(&out_path, &params.store, &meta)
        .with_context(|| format!("writing {}", out_path.display()))?;

    let mut curve = String::from("epoch,l_rec\n");
    for (i, loss) in report.epoch_loss.iter().enumerate() {
        curve.push_str(&format!("{i},{loss}\n"));
    }
    write_atomic(&out_path.with_file_name("detector_curve.csv"), curve.as_bytes())?;
    println!(
        "detector checkpoint: {} ({} epochs, final loss {:.6})",
        out_path.display(),
        epochs,
        report.epoch_loss.last().copied().unwrap_or(f32::NAN)
    );
    Ok(())
}
