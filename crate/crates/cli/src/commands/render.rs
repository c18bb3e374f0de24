use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use kpdyn_core::keypoint::DetectorBackend;

use crate::config::Ctx;
use crate::draw::{depth_to_rgb, draw_disc, overlay_action, save_gif, KEYPOINT_COLOR};

use super::{default_keypoints, load_detector};

#[derive(Parser)]
pub struct Args {
    /// Episode log to render.
    #[arg(long)]
    log: PathBuf,
    /// Output directory; defaults to `{out}/frames/{log stem}`.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Integer pixel upscale.
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Detector for the keypoint overlay: "geometric", a checkpoint path,
    /// or "none".
    #[arg(long, default_value = "geometric")]
    detector: String,
    #[arg(long)]
    keypoints: Option<usize>,
    /// Skip the animated GIF.
    #[arg(long)]
    no_gif: bool,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let rollout = kpdyn_core::episode::load(&args.log)
        .with_context(|| format!("reading {}", args.log.display()))?;
    if rollout.frames.is_empty() {
        eprintln!("warning: {} holds an empty episode", args.log.display());
        return Ok(());
    }
    let stem = args
        .log
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "episode".to_string());
    let dir = args
        .dir
        .unwrap_or_else(|| ctx.out_root.join("frames").join(stem));
    std::fs::create_dir_all(&dir)?;

    let k = args
        .keypoints
        .unwrap_or_else(|| default_keypoints(rollout.task));
    let backend: Option<DetectorBackend> = if args.detector == "none" {
        None
    } else {
        Some(load_detector(&args.detector, k)?)
    };

    let scale = args.scale.max(1);
    let mut frames = Vec::with_capacity(rollout.frames.len());
    for (t, record) in rollout.frames.iter().enumerate() {
        let mut rgb = depth_to_rgb(&record.image, scale);
        if let Some(backend) = &backend {
            if let Ok(graph) = backend.keypoints(&record.image, k) {
                for i in 0..graph.k() {
                    let (row, col) = graph.locations[i];
                    draw_disc(
                        &mut rgb,
                        (col as f32 + 0.5) * scale as f32,
                        (row as f32 + 0.5) * scale as f32,
                        1.5 * scale as f32 / 2.0,
                        KEYPOINT_COLOR,
                    );
                }
            }
        }
        // The terminal record's action is a placeholder, not an executed
        // pick, so it gets no arrow.
        if t + 1 < rollout.frames.len() {
            overlay_action(&mut rgb, record.action);
        }
        let path = dir.join(format!("frame_{t:03}.png"));
        rgb.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        frames.push(rgb);
    }

    if !args.no_gif {
        save_gif(&dir.join("episode.gif"), &frames, 400)?;
    }
    println!(
        "rendered {} frames to {}",
        rollout.frames.len(),
        dir.display()
    );
    Ok(())
}
