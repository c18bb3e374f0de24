use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use kpdyn_core::episode::config_hash;
use kpdyn_core::sim::{TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, Policy};

use crate::config::{to_pretty_json, write_atomic, Ctx};

use super::{now_rfc3339, Manifest};

#[derive(Parser)]
pub struct Args {
    /// Task id: rope-0 | rope-45 | rope-90 | rope-135 | cloth-flatten | cloth-fold.
    #[arg(long)]
    task: String,
    #[arg(long)]
    episodes: usize,
    /// Behavior policy: random | scripted.
    #[arg(long, default_value = "random")]
    policy: String,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Output directory; defaults to `{out}/{task}`.
    #[arg(long)]
    dir: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let task_id = TaskId::parse(&args.task)?;
    let policy = match args.policy.as_str() {
        "random" => Policy::Random,
        "scripted" => Policy::Scripted,
        other => anyhow::bail!("unknown policy {other:?} (random | scripted)"),
    };
    // Collection does not evaluate success, so the threshold is a
    // placeholder; the logged flags use it, which eval recalibrates anyway.
    let mut task = TaskSpec::new(task_id, f32::NEG_INFINITY);
    if let Some(steps) = args.max_steps {
        task = task.with_max_steps(steps);
    }
    let dir = args
        .dir
        .unwrap_or_else(|| ctx.out_root.join(task_id.to_string()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (w, h) = (ctx.image_size, ctx.image_size);
    let rollouts = collect(&task, args.episodes, policy, ctx.seed, &ctx.sim, w, h);
    let mut files = Vec::with_capacity(rollouts.len());
    for (i, rollout) in rollouts.iter().enumerate() {
        let name = format!("ep_{i:05}.log");
        kpdyn_core::episode::save(&dir.join(&name), rollout)?;
        files.push(name);
    }

    let manifest = Manifest {
        task: task_id,
        episodes: args.episodes,
        seed: ctx.seed,
        policy: args.policy.clone(),
        config_hash: config_hash(&ctx.sim, task_id, w, h),
        image_width: w,
        image_height: h,
        files,
        created_at: now_rfc3339(),
    };
    write_atomic(
        &dir.join("manifest.json"),
        &to_pretty_json(&serde_json::to_value(&manifest)?),
    )?;
    println!(
        "wrote {} episode logs to {} (config {})",
        args.episodes,
        dir.display(),
        manifest.config_hash
    );
    Ok(())
}
