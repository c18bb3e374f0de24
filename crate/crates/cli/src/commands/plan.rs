use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use kpdyn_core::episode::config_hash;
use kpdyn_core::planner::{plan, PlanConfig, RewardMode};
use kpdyn_core::sim::{render_depth, reset, TaskId, TaskSpec};
use serde_json::json;

use crate::config::{to_pretty_json, write_atomic, Ctx};

use super::{check_hash, load_detector};

#[derive(Parser)]
pub struct Args {
    /// Dynamics checkpoint path.
    #[arg(long)]
    model: PathBuf,
    /// Detector backend: "geometric" or a detector checkpoint path.
    #[arg(long, default_value = "geometric")]
    detector: String,
    /// Plan from a frame of this episode log instead of a fresh reset.
    #[arg(long)]
    from_log: Option<PathBuf>,
    /// Frame index within --from-log.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Task for a fresh reset when no log is given.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    elites: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Single unseeded CEM branch instead of per-keypoint branches.
    #[arg(long)]
    plain_cem: bool,
    /// Dump per-branch diagnostics (returns, elite traces) as JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let (params, meta) = super::eval::load_dynamics(&args.model)?;
    let backend = load_detector(&args.detector, params.cfg.keypoints)?;

    let image = match (&args.from_log, &args.task) {
        (Some(path), _) => {
            let rollout = kpdyn_core::episode::load(path)?;
            let frame = rollout
                .frames
                .get(args.frame)
                .with_context(|| format!("log has {} frames", rollout.frames.len()))?;
            let expected = config_hash(
                &ctx.sim,
                rollout.task,
                frame.image.width,
                frame.image.height,
            );
            check_hash(&expected, &rollout.config_hash, "episode log", args.force)?;
            frame.image.clone()
        }
        (None, Some(task)) => {
            let task = TaskSpec::new(TaskId::parse(task)?, f32::NEG_INFINITY);
            let state = reset(&task, ctx.seed, &ctx.sim);
            render_depth(&state, ctx.image_size, ctx.image_size, &ctx.sim)
        }
        (None, None) => anyhow::bail!("pass either --from-log or --task"),
    };

    let graph = backend.keypoints(&image, params.cfg.keypoints)?;
    let defaults = PlanConfig::default();
    let plan_cfg = PlanConfig {
        horizon: args.horizon.unwrap_or(defaults.horizon),
        population: args.population.unwrap_or(defaults.population),
        elites: args.elites.unwrap_or(defaults.elites),
        iterations: args.iterations.unwrap_or(defaults.iterations),
        plain_cem: args.plain_cem,
        ..defaults
    };
    let belief = params.zero_belief();
    let outcome = plan(
        &params,
        &belief,
        &graph,
        &plan_cfg,
        RewardMode::Learned,
        ctx.seed,
    )?;

    let action = outcome.action;
    let result = json!({
        "action": {"xs": action.xs, "ys": action.ys, "xg": action.xg, "yg": action.yg},
        "chosen": {
            "branch": outcome.diagnostics.chosen.0,
            "iteration": outcome.diagnostics.chosen.1,
            "sample": outcome.diagnostics.chosen.2,
        },
        "branch_returns": outcome.diagnostics.branch_returns,
        "model": meta["config_hash"].clone(),
    });
    println!("{}", serde_json::to_string_pretty(&result)?);

    if let Some(path) = args.diagnostics {
        let diag = json!({
            "branch_returns": outcome.diagnostics.branch_returns,
            "elite_means": outcome.diagnostics.elite_means,
            "chosen": [
                outcome.diagnostics.chosen.0,
                outcome.diagnostics.chosen.1,
                outcome.diagnostics.chosen.2,
            ],
            "keypoints": graph.locations,
        });
        write_atomic(&path, &to_pretty_json(&diag))?;
    }
    Ok(())
}
