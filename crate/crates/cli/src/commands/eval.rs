use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use kpdyn_core::autodiff::checkpoint;
use kpdyn_core::dynamics::{DynamicsParams, ModelConfig};
use kpdyn_core::episode::config_hash;
use kpdyn_core::planner::{evaluate_policy, EvalPolicy, PlanConfig, RewardMode};
use kpdyn_core::sim::TaskSpec;
use kpdyn_core::trainer::{calibrate_threshold, collect, encode_rollouts, top1_accuracy, Policy};
use serde_json::json;

use crate::config::{to_pretty_json, write_atomic, Ctx};

use super::{check_hash, load_dataset, load_detector};

#[derive(Parser)]
pub struct Args {
    /// Held-out dataset directory (episode logs + manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Dynamics checkpoint path.
    #[arg(long)]
    model: PathBuf,
    /// Detector backend: "geometric" or a detector checkpoint path.
    #[arg(long, default_value = "geometric")]
    detector: String,
    /// Negatives per top-1 query.
    #[arg(long, default_value_t = 50)]
    negatives: usize,
    /// Open-loop unroll horizon for top-1 accuracy.
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Closed-loop planner episodes (0 skips the closed-loop block).
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Scripted episodes used to calibrate the success threshold.
    #[arg(long, default_value_t = 30)]
    calibration_episodes: usize,
    /// Explicit success threshold; skips calibration.
    #[arg(long)]
    threshold: Option<f32>,
    /// Episode step budget for the closed-loop block.
    #[arg(long, default_value_t = 20)]
    max_steps: usize,
    #[arg(long)]
    force: bool,
    /// Report path; defaults to `{out}/report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn load_dynamics(path: &PathBuf) -> Result<(DynamicsParams, serde_json::Value)> {
    let (store, meta) = checkpoint::load(path)
        .with_context(|| format!("loading dynamics checkpoint {}", path.display()))?;
    if meta["namespace"] != "dynamics" {
        bail!(
            "{} is not a dynamics checkpoint (namespace {})",
            path.display(),
            meta["namespace"]
        );
    }
    let cfg: ModelConfig =
        serde_json::from_value(meta["model"].clone()).context("dynamics checkpoint metadata")?;
    Ok((DynamicsParams { store, cfg }, meta))
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

    let (params, meta) = load_dynamics(&args.model)?;
    check_hash(
        &expected,
        meta["config_hash"].as_str().unwrap_or("missing"),
        "dynamics checkpoint",
        args.force,
    )?;
    let backend = load_detector(&args.detector, params.cfg.keypoints)?;
    if backend.kind() != meta["detector"].as_str().unwrap_or("geometric") {
        check_hash(
            backend.kind(),
            meta["detector"].as_str().unwrap_or("?"),
            "detector kind",
            args.force,
        )?;
    }
    if backend.feat_dim() != params.cfg.feat_dim {
        bail!(
            "detector produces {}-dim features but the model expects {}",
            backend.feat_dim(),
            params.cfg.feat_dim
        );
    }

    let encoded = encode_rollouts(&rollouts, &backend, params.cfg.keypoints)?;
    let context_len = meta["train"]["context_len"].as_u64().unwrap_or(2) as usize;
    let accuracy = top1_accuracy(
        &params,
        &encoded,
        args.negatives,
        args.horizon,
        context_len,
        ctx.seed,
    )?;

    let (w, h) = (manifest.image_width, manifest.image_height);
    let mut report = json!({
        "task": manifest.task,
        "config_hash": expected,
        "seed": ctx.seed,
        "negatives": args.negatives,
        "horizon": args.horizon,
        "top1_accuracy": accuracy,
        "heldout_episodes": rollouts.len(),
        "ablation": meta["ablation"].clone(),
    });

    if args.episodes > 0 {
        let threshold = match args.threshold {
            Some(t) => t,
            None => {
                let scripted_task = TaskSpec::new(manifest.task, f32::NEG_INFINITY);
                let scripted = collect(
                    &scripted_task,
                    args.calibration_episodes,
                    Policy::Scripted,
                    ctx.seed ^ 0xca11_b8a7e,
                    &ctx.sim,
                    w,
                    h,
                );
                calibrate_threshold(&scripted)?
            }
        };
        let task = TaskSpec::new(manifest.task, threshold);
        let plan_cfg = PlanConfig::default();
        let outcome = evaluate_policy(
            &task,
            &backend,
            &EvalPolicy::Planned {
                params: &params,
                plan_cfg: &plan_cfg,
                mode: RewardMode::Learned,
            },
            args.episodes,
            ctx.seed ^ 0x65_7661_1u64,
            &ctx.sim,
            w,
            h,
        )?;
        report["success_threshold"] = json!(threshold);
        report["episodes"] = json!(outcome.episodes);
        report["success_rate"] = json!(outcome.success_rate);
        report["mean_best_reward"] = json!(outcome.mean_best_reward);
    }

    let path = args
        .report
        .unwrap_or_else(|| ctx.out_root.join("report.json"));
    write_atomic(&path, &to_pretty_json(&report))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
