//! Data collection, contrastive sequence training, and evaluation metrics.
//!
//! Training unrolls the dynamics model open-loop: the belief warms up over
//! `context_len` encoded observations, then predictions feed the recurrence
//! for `unroll_len` steps while the loss pulls each predicted pooled state
//! toward the encoded pooled state of the matching future frame and pushes
//! it beyond the margin from `negatives` encoded states sampled elsewhere in
//! the dataset. The reward head regresses the logged ground-truth rewards
//! over the same unroll.
//!
//! Batch members run on independent tapes (in parallel under the `parallel`
//! feature); their gradients are summed in member order, so training is
//! bit-deterministic regardless of thread count.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamError, Tape, TapeError, Tensor, Var};
use crate::dynamics::{AblationFlags, BoundDynamics, DynamicsError, DynamicsParams, ModelConfig};
use crate::episode::{config_hash, Rollout, StepRecord};
use crate::exec;
use crate::keypoint::{DetectorBackend, KeypointError};
use crate::sim::{
    is_success, render_depth, reset, reward, rope_goal_points, step, Action, DepthImage,
    ObjectKind, ParticleState, SimConfig, TaskId, TaskSpec,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{preds} predictions vs {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("contrastive loss needs at least one negative")]
    NoNegatives,
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("need at least {needed} held-out frames for negatives, have {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("threshold calibration needs at least {needed} scripted episodes, got {got}")]
    TooFewDemos { needed: usize, got: usize },
    #[error("no episode is long enough for context {context} plus unroll {unroll}")]
    EpisodesTooShort { context: usize, unroll: usize },
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Behavior policy for data collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Picks uniformly over object-mask pixels, places uniformly at random.
    Random,
    /// Greedy ground-truth solver; used for threshold calibration.
    Scripted,
}

/// Training hyperparameters; every field has the documented default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub context_len: usize,
    pub unroll_len: usize,
    pub negatives: usize,
    pub margin: f32,
    /// Weight of the reward-regression term.
    pub reward_weight: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            context_len: 2,
            unroll_len: 5,
            negatives: 10,
            margin: 1.0,
            reward_weight: 1.0,
            batch_size: 16,
            epochs: 50,
            lr: 1e-3,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.unroll_len < 1 {
            return fail("unroll_len must be at least 1");
        }
        if self.negatives < 1 {
            return fail("negatives must be at least 1");
        }
        if self.margin <= 0.0 {
            return fail("margin must be positive");
        }
        if self.reward_weight < 0.0 {
            return fail("reward_weight must be nonnegative");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.ablation.no_contrastive && self.ablation.info_nce {
            return fail("NoContrastive and InfoNCE are mutually exclusive");
        }
        Ok(())
    }
}

/// Deterministic per-episode seed derivation.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn random_action(image: &DepthImage, rng: &mut ChaCha8Rng) -> Action {
    let mask = image.nonzero_pixels();
    let (xs, ys) = if mask.is_empty() {
        (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
    } else {
        let (r, c) = mask[rng.random_range(0..mask.len())];
        image.pixel_to_workspace(r, c)
    };
    Action::new(
        xs,
        ys,
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    )
}

/// Per-particle targets for the greedy scripted solver.
fn scripted_targets(state: &ParticleState, task: &TaskSpec) -> Vec<[f32; 3]> {
    match (task.id, state.kind) {
        (id, ObjectKind::Rope) if id.is_rope() => {
            let spacing = state.constraints.first().map_or(0.0, |c| c.rest);
            let goal = rope_goal_points(
                state.len(),
                spacing,
                id.angle_degrees().expect("rope task").to_radians(),
            );
            // Use whichever endpoint ordering is already closer.
            let dist = |points: &[[f32; 3]], rev: bool| -> f32 {
                state
                    .positions
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let g = if rev { points[state.len() - 1 - i] } else { points[i] };
                        crate::sim::dist3(*p, g)
                    })
                    .sum()
            };
            if dist(&goal, false) <= dist(&goal, true) {
                goal
            } else {
                goal.into_iter().rev().collect()
            }
        }
        (TaskId::ClothFlatten, ObjectKind::Cloth { rows, cols }) => {
            let spacing = state.constraints.first().map_or(0.0, |c| c.rest);
            let cx = state.positions.iter().map(|p| p[0]).sum::<f32>() / state.len() as f32;
            let cy = state.positions.iter().map(|p| p[1]).sum::<f32>() / state.len() as f32;
            crate::sim::cloth_grid(rows, cols, spacing, (cx, cy), 0.0)
        }
        (TaskId::ClothFold, ObjectKind::Cloth { rows, cols }) => {
            // Fold left onto right: left-half targets are the current
            // positions of their mirror partners.
            let mut targets = state.positions.clone();
            for r in 0..rows {
                for c in 0..cols / 2 {
                    targets[r * cols + c] = state.positions[r * cols + (cols - 1 - c)];
                }
            }
            targets
        }
        _ => state.positions.clone(),
    }
}

fn scripted_action(state: &ParticleState, task: &TaskSpec) -> Action {
    let targets = scripted_targets(state, task);
    let mut worst = 0;
    let mut worst_d = -1.0f32;
    for (i, (p, t)) in state.positions.iter().zip(&targets).enumerate() {
        let d = crate::sim::dist2(*p, *t);
        if d > worst_d {
            worst_d = d;
            worst = i;
        }
    }
    let p = state.positions[worst];
    let t = targets[worst];
    Action::new(p[0], p[1], t[0], t[1]).clamped()
}

fn collect_episode(
    task: &TaskSpec,
    policy: Policy,
    ep_seed: u64,
    sim_cfg: &SimConfig,
    width: usize,
    height: usize,
    hash: &str,
) -> Rollout {
    let mut rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut state = reset(task, ep_seed, sim_cfg);
    let mut frames = Vec::with_capacity(task.max_steps + 1);
    for _ in 0..task.max_steps {
        let image = render_depth(&state, width, height, sim_cfg);
        let action = match policy {
            Policy::Random => random_action(&image, &mut rng),
            Policy::Scripted => scripted_action(&state, task),
        };
        frames.push(StepRecord {
            image,
            action,
            reward: reward(&state, task).expect("task matches object"),
            success: is_success(&state, task).expect("task matches object"),
        });
        state = step(&state, action, sim_cfg);
    }
    frames.push(StepRecord {
        image: render_depth(&state, width, height, sim_cfg),
        action: Action::ZERO,
        reward: reward(&state, task).expect("task matches object"),
        success: is_success(&state, task).expect("task matches object"),
    });
    Rollout {
        task: task.id,
        seed: ep_seed,
        config_hash: hash.to_string(),
        frames,
    }
}

/// Collect episodes with the given behavior policy, deterministic per seed.
/// Episodes run in parallel; output order is episode order.
pub fn collect(
    task: &TaskSpec,
    episodes: usize,
    policy: Policy,
    seed: u64,
    sim_cfg: &SimConfig,
    width: usize,
    height: usize,
) -> Vec<Rollout> {
    let hash = config_hash(sim_cfg, task.id, width, height);
    exec::map_indexed(episodes, |i| {
        collect_episode(
            task,
            policy,
            episode_seed(seed, i),
            sim_cfg,
            width,
            height,
            &hash,
        )
    })
}

/// An episode reduced to detector outputs: per-frame keypoint features plus
/// the logged actions and rewards.
#[derive(Debug, Clone)]
pub struct EncodedEpisode {
    /// Per frame, flattened `k x feat_dim` keypoint features.
    pub feats: Vec<Vec<f32>>,
    pub actions: Vec<[f32; 4]>,
    pub rewards: Vec<f32>,
    pub feat_dim: usize,
    pub k: usize,
}

impl EncodedEpisode {
    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    pub fn feats_tensor(&self, frame: usize) -> Tensor {
        Tensor::new(vec![self.k, self.feat_dim], self.feats[frame].clone())
    }
}

/// Run the detector over every frame of every rollout.
pub fn encode_rollouts(
    rollouts: &[Rollout],
    backend: &DetectorBackend,
    k: usize,
) -> Result<Vec<EncodedEpisode>, KeypointError> {
    let results = exec::map_indexed(rollouts.len(), |i| {
        let rollout = &rollouts[i];
        let mut feats = Vec::with_capacity(rollout.frames.len());
        for frame in &rollout.frames {
            let graph = backend.keypoints(&frame.image, k)?;
            feats.push(graph.features.clone());
        }
        Ok::<_, KeypointError>(EncodedEpisode {
            feats,
            actions: rollout.frames.iter().map(|f| f.action.to_array()).collect(),
            rewards: rollout.frames.iter().map(|f| f.reward).collect(),
            feat_dim: backend.feat_dim(),
            k,
        })
    });
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn l2_between(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TapeError> {
    let diff = tape.sub(a, b)?;
    Ok(tape.l2_norm(diff))
}

fn add_all(tape: &mut Tape, terms: &[Var]) -> Result<Var, TapeError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Contrastive dynamics loss over an unroll.
///
/// Default: per step, the distance to the encoded target plus a hinge
/// `max(0, margin - d)` per negative. `NoContrastive` drops the hinge term;
/// `InfoNCE` replaces the whole expression with InfoNCE over L2-distance
/// logits.
pub fn dynamics_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Var],
    negatives: &[Var],
    margin: f32,
    flags: AblationFlags,
) -> Result<Var, TrainError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(TrainError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    let contrastive = !flags.no_contrastive;
    if contrastive && negatives.is_empty() {
        return Err(TrainError::NoNegatives);
    }
    let mut terms = Vec::new();
    for (&pred, &target) in preds.iter().zip(targets) {
        let d_pos = l2_between(tape, pred, target)?;
        if flags.info_nce {
            // L = d_pos + logsumexp(-d_all); the shift constant comes from
            // forward values, which leaves gradients untouched.
            let mut dists = vec![d_pos];
            for &neg in negatives {
                dists.push(l2_between(tape, pred, neg)?);
            }
            let shift = dists
                .iter()
                .map(|&d| -tape.value(d).item())
                .fold(f32::NEG_INFINITY, f32::max);
            let mut exps = Vec::with_capacity(dists.len());
            for &d in &dists {
                let neg_d = tape.scale(d, -1.0);
                let shifted = tape.add_scalar(neg_d, -shift);
                exps.push(tape.exp(shifted));
            }
            let total = add_all(tape, &exps)?;
            let ln = tape.ln(total);
            let lse = tape.add_scalar(ln, shift);
            terms.push(tape.add(d_pos, lse)?);
        } else {
            terms.push(d_pos);
            if contrastive {
                for &neg in negatives {
                    let d_neg = l2_between(tape, pred, neg)?;
                    let neg_d = tape.scale(d_neg, -1.0);
                    let gap = tape.add_scalar(neg_d, margin);
                    terms.push(tape.relu(gap));
                }
            }
        }
    }
    Ok(add_all(tape, &terms)?)
}

/// Sum of squared reward-prediction errors over the unroll.
pub fn reward_loss(tape: &mut Tape, preds: &[Var], truths: &[f32]) -> Result<Var, TrainError> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(TrainError::LengthMismatch {
            preds: preds.len(),
            targets: truths.len(),
        });
    }
    let mut terms = Vec::new();
    for (&pred, &truth) in preds.iter().zip(truths) {
        let flat = tape.reshape(pred, vec![1])?;
        let diff = tape.add_scalar(flat, -truth);
        terms.push(tape.mul(diff, diff)?);
    }
    Ok(add_all(tape, &terms)?)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Median per-batch dynamics loss.
    pub dynamics_loss: f32,
    /// Median per-batch reward loss.
    pub reward_loss: f32,
    pub total: f32,
}

pub struct TrainOutcome {
    pub params: DynamicsParams,
    pub curve: Vec<EpochStats>,
}

#[derive(Clone, Copy)]
struct Window {
    episode: usize,
    start: usize,
}

fn enumerate_windows(data: &[EncodedEpisode], cfg: &TrainConfig) -> Vec<Window> {
    let span = cfg.context_len + cfg.unroll_len;
    let mut windows = Vec::new();
    for (episode, ep) in data.iter().enumerate() {
        if ep.len() <= span {
            continue;
        }
        for start in 0..=(ep.len() - 1 - span) {
            windows.push(Window { episode, start });
        }
    }
    windows
}

/// Open-loop forward pass for one window. Returns `(L_D, L_R, total)` vars.
fn window_losses(
    tape: &mut Tape,
    model: &BoundDynamics,
    data: &[EncodedEpisode],
    window: Window,
    negatives: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<(Var, Var, Var), TrainError> {
    let ep = &data[window.episode];
    let mut h = tape.constant(Tensor::zeros(vec![1, model.cfg.belief_dim]));
    let mut preds = Vec::with_capacity(cfg.unroll_len);
    let mut reward_preds = Vec::with_capacity(cfg.unroll_len);

    let mut nodes = {
        let feats = tape.constant(ep.feats_tensor(window.start));
        model.embed_nodes(tape, feats)?
    };
    for step_idx in 0..cfg.context_len + cfg.unroll_len - 1 {
        let t = window.start + step_idx;
        let action = tape.constant(Tensor::new(vec![1, 4], ep.actions[t].to_vec()));
        let out = model.step(tape, h, nodes, action)?;
        h = out.belief;
        if step_idx + 1 >= cfg.context_len {
            // Prediction for frame t + 1.
            preds.push(out.pooled);
            reward_preds.push(model.predict_reward(tape, out.pooled)?);
            // Open loop: predictions feed the next step.
            nodes = out.nodes_pred;
        } else {
            // Warm-up: the next encoded observation drives the belief.
            let feats = tape.constant(ep.feats_tensor(t + 1));
            nodes = model.embed_nodes(tape, feats)?;
        }
    }

    let first_target = window.start + cfg.context_len;
    let mut targets = Vec::with_capacity(cfg.unroll_len);
    let mut truth_rewards = Vec::with_capacity(cfg.unroll_len);
    for j in 0..cfg.unroll_len {
        let t = first_target + j;
        let feats = tape.constant(ep.feats_tensor(t));
        let (_, pooled) = model.encode(tape, feats)?;
        targets.push(pooled);
        truth_rewards.push(ep.rewards[t]);
    }
    let neg_vars: Vec<Var> = negatives
        .iter()
        .map(|&(e, f)| {
            let feats = tape.constant(data[e].feats_tensor(f));
            model.encode(tape, feats).map(|(_, pooled)| pooled)
        })
        .collect::<Result<_, _>>()?;

    let l_d = dynamics_loss(tape, &preds, &targets, &neg_vars, cfg.margin, cfg.ablation)?;
    let l_r = reward_loss(tape, &reward_preds, &truth_rewards)?;
    let weighted = tape.scale(l_r, cfg.reward_weight);
    let total = tape.add(l_d, weighted)?;
    Ok((l_d, l_r, total))
}

/// Per-dimension mean and standard deviation of keypoint features over the
/// whole dataset (all frames, all keypoints).
fn feature_moments(data: &[EncodedEpisode], feat_dim: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f64; feat_dim];
    let mut count = 0usize;
    for ep in data {
        for frame in &ep.feats {
            for node in frame.chunks(feat_dim) {
                for (m, &v) in mean.iter_mut().zip(node) {
                    *m += v as f64;
                }
                count += 1;
            }
        }
    }
    for m in &mut mean {
        *m /= count.max(1) as f64;
    }
    let mut var = vec![0.0f64; feat_dim];
    for ep in data {
        for frame in &ep.feats {
            for node in frame.chunks(feat_dim) {
                for (d, (v, m)) in node.iter().zip(&mean).enumerate() {
                    var[d] += (*v as f64 - m).powi(2);
                }
            }
        }
    }
    let means: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let stds: Vec<f32> = var
        .iter()
        .map(|&v| ((v / count.max(1) as f64).sqrt() as f32).max(1e-9))
        .collect();
    (means, stds)
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sample `n` negative frames from episodes other than `exclude`; if the
/// dataset has no other episode, fall back to same-episode frames that are
/// not in the predicted window.
fn sample_negatives(
    data: &[EncodedEpisode],
    exclude: Window,
    span: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let multi = data.len() > 1;
    let mut out = Vec::with_capacity(n);
    let mut guard = 0;
    while out.len() < n {
        let e = rng.random_range(0..data.len());
        let f = rng.random_range(0..data[e].len());
        let ok = if multi {
            e != exclude.episode
        } else {
            f < exclude.start + span || f > exclude.start + 2 * span
        };
        if ok || guard > 10_000 {
            out.push((e, f));
        }
        guard += 1;
    }
    out
}

/// Train the dynamics model; returns the parameters and the per-epoch loss
/// medians. The ablation flags in `cfg` override the model configuration so
/// a single switch controls both the architecture and the loss.
pub fn train(
    data: &[EncodedEpisode],
    cfg: &TrainConfig,
    base_model: ModelConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model_cfg = base_model.with_ablation(cfg.ablation);
    let mut params = DynamicsParams::init(model_cfg, seed);
    let (means, stds) = feature_moments(data, model_cfg.feat_dim);
    params.set_feature_normalizer(&means, &stds);
    let windows = enumerate_windows(data, cfg);
    if windows.is_empty() {
        return Err(TrainError::EpisodesTooShort {
            context: cfg.context_len,
            unroll: cfg.unroll_len,
        });
    }
    let span = cfg.context_len + cfg.unroll_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e_5f72_6e67);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = windows.clone();
        order.shuffle(&mut rng);
        let mut ld_batches = Vec::new();
        let mut lr_batches = Vec::new();
        let mut total_batches = Vec::new();

        for chunk in order.chunks(cfg.batch_size) {
            let negs: Vec<Vec<(usize, usize)>> = chunk
                .iter()
                .map(|w| sample_negatives(data, *w, span, cfg.negatives, &mut rng))
                .collect();
            let members = exec::map_indexed(chunk.len(), |i| {
                let mut tape = Tape::new();
                let model = params.bind(&mut tape, true);
                let (l_d, l_r, total) =
                    window_losses(&mut tape, &model, data, chunk[i], &negs[i], cfg)?;
                let values = (
                    tape.value(l_d).item(),
                    tape.value(l_r).item(),
                    tape.value(total).item(),
                );
                let grads = tape.backward(total)?.into_by_path();
                Ok::<_, TrainError>((values, grads))
            });

            let mut summed: Option<std::collections::BTreeMap<String, Tensor>> = None;
            let mut ld_sum = 0.0;
            let mut lr_sum = 0.0;
            let mut total_sum = 0.0;
            let count = chunk.len() as f32;
            for member in members {
                let ((l_d, l_r, total), grads) = member?;
                if !total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { batch: batch_index });
                }
                ld_sum += l_d;
                lr_sum += l_r;
                total_sum += total;
                match &mut summed {
                    None => summed = Some(grads),
                    Some(acc) => {
                        for (path, grad) in grads {
                            let slot = acc.get_mut(&path).expect("same binding set");
                            let dst = slot.data_mut();
                            for (d, s) in dst.iter_mut().zip(grad.data()) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            let mut grads = summed.expect("nonempty batch");
            for grad in grads.values_mut() {
                for v in grad.data_mut() {
                    *v /= count;
                }
            }
            params
                .store
                .adam_step(&grads, cfg.lr, (0.9, 0.999), 1e-8)?;
            ld_batches.push(ld_sum / count);
            lr_batches.push(lr_sum / count);
            total_batches.push(total_sum / count);
            batch_index += 1;
        }

        curve.push(EpochStats {
            epoch,
            dynamics_loss: median(&mut ld_batches),
            reward_loss: median(&mut lr_batches),
            total: median(&mut total_batches),
        });
    }
    Ok(TrainOutcome { params, curve })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// One top-1 decision: the prediction must be strictly closer to the
/// positive than to every negative.
pub fn is_top1(pred: &[f32], positive: &[f32], negatives: &[&[f32]]) -> bool {
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
    };
    let d_pos = dist(pred, positive);
    negatives.iter().all(|n| d_pos < dist(pred, n))
}

/// Encode every frame's pooled state with the current model (no gradients).
fn encode_all_pooled(params: &DynamicsParams, data: &[EncodedEpisode]) -> Vec<Vec<Vec<f32>>> {
    exec::map_indexed(data.len(), |e| {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let mut out = Vec::with_capacity(data[e].len());
        for f in 0..data[e].len() {
            let feats = tape.constant(data[e].feats_tensor(f));
            let (_, pooled) = model.encode(&mut tape, feats).expect("consistent dims");
            out.push(tape.value(pooled).data().to_vec());
        }
        out
    })
}

/// Top-1 prediction accuracy: unroll open-loop up to `horizon` steps after a
/// `context_len` warm-up and score each prediction against `n_negatives`
/// encoded frames drawn from the other held-out episodes.
pub fn top1_accuracy(
    params: &DynamicsParams,
    heldout: &[EncodedEpisode],
    n_negatives: usize,
    horizon: usize,
    context_len: usize,
    seed: u64,
) -> Result<f32, TrainError> {
    if heldout.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encoded = encode_all_pooled(params, heldout);
    let pool: Vec<(usize, usize)> = heldout
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |f| (e, f)))
        .collect();
    let outside_pool = |e: usize| pool.iter().filter(|&&(pe, _)| pe != e).count();

    let per_episode = exec::map_indexed(heldout.len(), |e| {
        let ep = &heldout[e];
        if ep.len() <= context_len + 1 {
            return Ok::<_, TrainError>((0usize, 0usize));
        }
        if outside_pool(e) < n_negatives && heldout.len() > 1 {
            return Err(TrainError::InsufficientFrames {
                needed: n_negatives,
                available: outside_pool(e),
            });
        }
        if heldout.len() == 1 {
            return Err(TrainError::InsufficientFrames {
                needed: n_negatives,
                available: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, e));
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let mut h = tape.constant(Tensor::zeros(vec![1, model.cfg.belief_dim]));
        let mut nodes = {
            let feats = tape.constant(ep.feats_tensor(0));
            model.embed_nodes(&mut tape, feats)?
        };
        let steps = (ep.len() - 1).min(context_len + horizon);
        let mut hits = 0;
        let mut points = 0;
        for step_idx in 0..steps {
            let action = tape.constant(Tensor::new(vec![1, 4], ep.actions[step_idx].to_vec()));
            let out = model.step(&mut tape, h, nodes, action)?;
            h = out.belief;
            if step_idx + 1 >= context_len {
                nodes = out.nodes_pred;
            } else {
                let feats = tape.constant(ep.feats_tensor(step_idx + 1));
                nodes = model.embed_nodes(&mut tape, feats)?;
            }
            if step_idx + 1 >= context_len {
                let pred = tape.value(out.pooled).data().to_vec();
                let positive = &encoded[e][step_idx + 1];
                let mut negs = Vec::with_capacity(n_negatives);
                let mut guard = 0;
                while negs.len() < n_negatives && guard < 100_000 {
                    let (pe, pf) = pool[rng.random_range(0..pool.len())];
                    if pe != e {
                        negs.push(encoded[pe][pf].as_slice());
                    }
                    guard += 1;
                }
                if is_top1(&pred, positive, &negs) {
                    hits += 1;
                }
                points += 1;
            }
        }
        Ok((hits, points))
    });

    let mut hits = 0usize;
    let mut points = 0usize;
    for r in per_episode {
        let (h, p) = r?;
        hits += h;
        points += p;
    }
    if points == 0 {
        return Err(TrainError::EpisodesTooShort {
            context: context_len,
            unroll: 1,
        });
    }
    Ok(hits as f32 / points as f32)
}

/// 5th-percentile reward over scripted near-goal episodes (linear
/// interpolation). This is the method behind every task threshold.
pub fn calibrate_threshold(scripted: &[Rollout]) -> Result<f32, TrainError> {
    const NEEDED: usize = 20;
    if scripted.len() < NEEDED {
        return Err(TrainError::TooFewDemos {
            needed: NEEDED,
            got: scripted.len(),
        });
    }
    let mut rewards: Vec<f32> = scripted.iter().map(Rollout::best_reward).collect();
    rewards.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile_sorted(&rewards, 0.05))
}

fn percentile_sorted(sorted: &[f32], p: f32) -> f32 {
    let n = sorted.len();
    let q = p * (n as f32 - 1.0);
    let lo = q.floor() as usize;
    let hi = q.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = q - lo as f32;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{nearest_within, TaskSpec};

    fn rope_task() -> TaskSpec {
        TaskSpec::new(TaskId::Rope0, 0.0)
    }

    #[test]
    fn collect_zero_episodes_is_empty() {
        let cfg = SimConfig::default();
        let out = collect(&rope_task(), 0, Policy::Random, 1, &cfg, 32, 32);
        assert!(out.is_empty());
    }

    #[test]
    fn collect_is_deterministic() {
        let cfg = SimConfig::default();
        let task = rope_task().with_max_steps(3);
        let a = collect(&task, 2, Policy::Random, 7, &cfg, 32, 32);
        let b = collect(&task, 2, Policy::Random, 7, &cfg, 32, 32);
        assert_eq!(a, b);
    }

    #[test]
    fn random_policy_rarely_misses_the_object() {
        let cfg = SimConfig::default();
        let task = rope_task().with_max_steps(5);
        let rollouts = collect(&task, 20, Policy::Random, 3, &cfg, 64, 64);
        let mut noops = 0usize;
        let mut total = 0usize;
        for (i, rollout) in rollouts.iter().enumerate() {
            // Re-simulate to see which picks actually grabbed a particle.
            let mut state = reset(&task, episode_seed(3, i), &cfg);
            for (rec, action, _) in rollout.transitions() {
                let _ = rec;
                if nearest_within(&state, action.xs, action.ys, cfg.pick_radius).is_none() {
                    noops += 1;
                }
                total += 1;
                state = step(&state, action, &cfg);
            }
        }
        let frac = noops as f32 / total as f32;
        assert!(frac < 0.05, "no-op fraction {frac}");
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            keypoints: 2,
            feat_dim: 3,
            node_dim: 4,
            belief_dim: 4,
            heads: 1,
            head_dim: 3,
            mgf_dim: 2,
            ablation: AblationFlags::default(),
        }
    }

    fn synthetic_episode(seed: u64, frames: usize) -> EncodedEpisode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncodedEpisode {
            feats: (0..frames)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..frames)
                .map(|_| {
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect(),
            rewards: (0..frames).map(|_| rng.random_range(-1.0..0.0)).collect(),
            feat_dim: 3,
            k: 2,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            context_len: 1,
            unroll_len: 2,
            negatives: 2,
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn hinge_loss_is_zero_at_the_optimum() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]));
        let far = tape.constant(Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]));
        let loss = dynamics_loss(&mut tape, &[v], &[v], &[far], 1.0, AblationFlags::default())
            .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn coincident_negative_contributes_the_margin() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]));
        let gamma = 0.75;
        let loss = dynamics_loss(&mut tape, &[v], &[v], &[v], gamma, AblationFlags::default())
            .unwrap();
        assert!((tape.value(loss).item() - gamma).abs() < 1e-7);
    }

    #[test]
    fn contrastive_without_negatives_is_an_error() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        assert!(matches!(
            dynamics_loss(&mut tape, &[v], &[v], &[], 1.0, AblationFlags::default()),
            Err(TrainError::NoNegatives)
        ));
        // NoContrastive accepts an empty negative set.
        let flags = AblationFlags {
            no_contrastive: true,
            ..Default::default()
        };
        assert!(dynamics_loss(&mut tape, &[v], &[v], &[], 1.0, flags).is_ok());
    }

    #[test]
    fn reward_loss_matches_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 1], vec![1.0]));
        let b = tape.constant(Tensor::new(vec![1, 1], vec![-1.0]));
        let zero = reward_loss(&mut tape, &[a, b], &[1.0, -1.0]).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
        let two = reward_loss(&mut tape, &[a, b], &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(two).item(), 2.0);
        assert!(matches!(
            reward_loss(&mut tape, &[a], &[0.0, 0.0]),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = vec![synthetic_episode(1, 6), synthetic_episode(2, 6)];
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_train_cfg()
        };
        let outcome = train(&data, &cfg, tiny_model(), 5).unwrap();
        assert!(outcome.curve.is_empty());
        // Zero epochs leaves every weight at its initialization; only the
        // data-fitted feature normalizer differs from a fresh init.
        let fresh = DynamicsParams::init(tiny_model(), 5);
        for (path, tensor) in fresh.store.iter() {
            if path.starts_with("dynamics/feat_norm/") {
                continue;
            }
            assert_eq!(outcome.params.store.get(path).unwrap().data(), tensor.data());
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = vec![
            synthetic_episode(1, 6),
            synthetic_episode(2, 6),
            synthetic_episode(3, 6),
        ];
        let cfg = tiny_train_cfg();
        let a = train(&data, &cfg, tiny_model(), 9).unwrap();
        let b = train(&data, &cfg, tiny_model(), 9).unwrap();
        assert_eq!(a.curve.len(), b.curve.len());
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        for (path, tensor) in a.params.store.iter() {
            let other = b.params.store.get(path).unwrap();
            for (av, bv) in tensor.data().iter().zip(other.data()) {
                assert_eq!(av.to_bits(), bv.to_bits());
            }
        }
    }

    #[test]
    fn zero_reward_weight_ignores_reward_labels() {
        let data = vec![synthetic_episode(1, 6), synthetic_episode(2, 6)];
        let mut corrupted = data.clone();
        for ep in &mut corrupted {
            for r in &mut ep.rewards {
                *r = 123.0;
            }
        }
        let cfg = TrainConfig {
            reward_weight: 0.0,
            ..tiny_train_cfg()
        };
        let a = train(&data, &cfg, tiny_model(), 4).unwrap();
        let b = train(&corrupted, &cfg, tiny_model(), 4).unwrap();
        for (path, tensor) in a.params.store.iter() {
            let other = b.params.store.get(path).unwrap();
            for (av, bv) in tensor.data().iter().zip(other.data()) {
                assert_eq!(av.to_bits(), bv.to_bits(), "param {path} diverged");
            }
        }
    }

    #[test]
    fn top1_point_logic() {
        let pred = [0.0f32, 0.0];
        let pos = [0.1f32, 0.0];
        let far = [1.0f32, 1.0];
        let near = [0.05f32, 0.0];
        assert!(is_top1(&pred, &pos, &[&far]));
        assert!(!is_top1(&pred, &pos, &[&near]));
        // Degenerate: everything identical fails the strict inequality.
        assert!(!is_top1(&pred, &pred, &[&pred]));
        // Shrinking the negative set never flips a hit into a miss.
        assert!(is_top1(&pred, &pos, &[]));
    }

    #[test]
    fn calibration_percentile_matches_hand_computation() {
        let make = |r: f32| Rollout {
            task: TaskId::Rope0,
            seed: 0,
            config_hash: String::new(),
            frames: vec![StepRecord {
                image: DepthImage::zeros(1, 1),
                action: Action::ZERO,
                reward: r,
                success: false,
            }],
        };
        let exact: Vec<Rollout> = (0..20).map(|_| make(-0.02)).collect();
        assert_eq!(calibrate_threshold(&exact).unwrap(), -0.02);

        // 20 rewards uniformly spread over [-0.05, -0.01].
        let spread: Vec<Rollout> = (0..20)
            .map(|i| make(-0.05 + i as f32 * (0.04 / 19.0)))
            .collect();
        let th = calibrate_threshold(&spread).unwrap();
        assert!((th - (-0.048)).abs() < 1e-3, "threshold {th}");

        assert!(matches!(
            calibrate_threshold(&[]),
            Err(TrainError::TooFewDemos { .. })
        ));
    }

    #[test]
    fn percentile_on_uniform_grid() {
        let sorted = [-0.05f32, -0.04, -0.03, -0.02, -0.01];
        let th = percentile_sorted(&sorted, 0.05);
        assert!((th - (-0.048)).abs() < 1e-6, "threshold {th}");
    }
}
