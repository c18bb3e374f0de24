//! Keypoint-seeded model-predictive control.
//!
//! Planning runs one cross-entropy-method search per keypoint: the pick
//! coordinates of the first action start at the keypoint's back-projected
//! pixel with Gaussian jitter, every other action component starts at the
//! workspace center. Each CEM iteration scores a population of action
//! sequences by rolling the learned dynamics out from a copy of the current
//! belief and graph, refits the sampling Gaussian to the elites, and carries
//! the elites into the next population (which makes the elite-mean return
//! non-decreasing for a deterministic model). The executed action is the
//! first step of the best candidate across all branches.
//!
//! Candidates are scored on independent tapes and merged in sample order, so
//! planning is deterministic under a fixed seed regardless of parallelism.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::dynamics::{goal_reward, DynamicsError, DynamicsParams};
use crate::episode::config_hash;
use crate::exec;
use crate::keypoint::{DetectorBackend, KeypointError, KeypointGraph};
use crate::sim::{is_success, render_depth, reset, reward, step, Action, SimConfig, SimError, TaskSpec};
use crate::trainer::episode_seed;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// CEM planning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct PlanConfig {
    /// Planning horizon (action sequence length).
    pub horizon: usize,
    /// Population per keypoint branch and iteration.
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Initial standard deviation of non-seeded action components.
    pub init_std: f32,
    /// Gaussian jitter around the keypoint for the first pick.
    pub pick_jitter: f32,
    /// Single unseeded branch instead of one branch per keypoint.
    pub plain_cem: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            population: 32,
            elites: 4,
            iterations: 4,
            init_std: 0.2,
            pick_jitter: 0.05,
            plain_cem: false,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.horizon < 1 || self.iterations < 1 || self.population < 1 {
            return Err(PlanError::InvalidConfig(
                "horizon, iterations, and population must be at least 1".into(),
            ));
        }
        if self.elites < 1 || self.elites > self.population {
            return Err(PlanError::InvalidConfig(format!(
                "elites {} must be in 1..=population {}",
                self.elites, self.population
            )));
        }
        Ok(())
    }
}

/// How rollouts are scored.
#[derive(Clone, Copy)]
pub enum RewardMode<'a> {
    /// Sum of learned reward-head predictions.
    Learned,
    /// Sum of negative distances to a pooled goal encoding.
    Goal(&'a [f32]),
}

/// Anything that can score an action sequence; planning is generic over this
/// so tests can plug in analytic stubs.
pub trait RolloutModel: Sync {
    fn rollout_return(&self, actions: &[Action]) -> f64;
}

/// The learned dynamics as a rollout scorer: open-loop unroll from a copy of
/// the current belief and encoded graph.
pub struct DynamicsRollout<'a> {
    pub params: &'a DynamicsParams,
    pub belief: &'a Tensor,
    /// Raw keypoint features, `[K, feat_dim]`.
    pub feats: &'a Tensor,
    pub mode: RewardMode<'a>,
}

impl RolloutModel for DynamicsRollout<'_> {
    fn rollout_return(&self, actions: &[Action]) -> f64 {
        let mut tape = Tape::new();
        let model = self.params.bind(&mut tape, false);
        let mut h = tape.constant(self.belief.clone());
        let feats = tape.constant(self.feats.clone());
        let mut nodes = model.embed_nodes(&mut tape, feats).expect("checked dims");
        let mut total = 0.0f64;
        for action in actions {
            let a = tape.constant(Tensor::new(vec![1, 4], action.to_array().to_vec()));
            let out = model.step(&mut tape, h, nodes, a).expect("checked dims");
            h = out.belief;
            nodes = out.nodes_pred;
            total += match self.mode {
                RewardMode::Learned => {
                    let r = model.predict_reward(&mut tape, out.pooled).expect("dims");
                    tape.value(r).item() as f64
                }
                RewardMode::Goal(goal) => {
                    goal_reward(tape.value(out.pooled).data(), goal).expect("dims") as f64
                }
            };
        }
        total
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanDiagnostics {
    /// Best return found in each branch.
    pub branch_returns: Vec<f64>,
    /// Elite-mean return per branch and iteration.
    pub elite_means: Vec<Vec<f64>>,
    /// `(branch, iteration, sample)` of the executed candidate.
    pub chosen: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub action: Action,
    pub diagnostics: PlanDiagnostics,
}

#[derive(Clone)]
struct Candidate {
    actions: Vec<Action>,
    ret: f64,
    iteration: usize,
    sample: usize,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    a.ret > b.ret || (a.ret == b.ret && (a.iteration, a.sample) < (b.iteration, b.sample))
}

fn sample_candidate(
    mean: &[[f32; 4]],
    std: &[[f32; 4]],
    rng: &mut ChaCha8Rng,
) -> Vec<Action> {
    mean.iter()
        .zip(std)
        .map(|(m, s)| {
            let mut a = [0.0f32; 4];
            for d in 0..4 {
                let dist = Normal::new(m[d], s[d].max(1e-6)).expect("finite parameters");
                a[d] = dist.sample(rng).clamp(0.0, 1.0);
            }
            Action::from_array(a)
        })
        .collect()
}

/// One CEM branch. Returns the branch's best candidate and its elite-mean
/// trace.
fn run_branch<M: RolloutModel>(
    model: &M,
    cfg: &PlanConfig,
    pick_seed: Option<(f32, f32)>,
    rng_seed: u64,
) -> (Candidate, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut mean = vec![[0.5f32; 4]; cfg.horizon];
    let mut std = vec![[cfg.init_std; 4]; cfg.horizon];
    if let Some((x, y)) = pick_seed {
        mean[0][0] = x;
        mean[0][1] = y;
        std[0][0] = cfg.pick_jitter;
        std[0][1] = cfg.pick_jitter;
    }

    let mut elites: Vec<Candidate> = Vec::new();
    let mut elite_means = Vec::with_capacity(cfg.iterations);
    let mut sample_counter = 0usize;

    for iteration in 0..cfg.iterations {
        let fresh_count = if iteration == 0 {
            cfg.population
        } else {
            cfg.population - cfg.elites.min(elites.len())
        };
        let fresh: Vec<Vec<Action>> = (0..fresh_count)
            .map(|_| sample_candidate(&mean, &std, &mut rng))
            .collect();
        let returns = exec::map_indexed(fresh.len(), |i| model.rollout_return(&fresh[i]));
        let mut pool = elites.clone();
        for (i, (actions, ret)) in fresh.into_iter().zip(returns).enumerate() {
            pool.push(Candidate {
                actions,
                ret,
                iteration,
                sample: sample_counter + i,
            });
        }
        sample_counter += fresh_count;

        pool.sort_by(|a, b| {
            b.ret
                .partial_cmp(&a.ret)
                .unwrap()
                .then_with(|| (a.iteration, a.sample).cmp(&(b.iteration, b.sample)))
        });
        pool.truncate(cfg.elites);
        elites = pool;
        elite_means.push(elites.iter().map(|c| c.ret).sum::<f64>() / elites.len() as f64);

        // Refit the Gaussian to the elites (std floored to keep sampling
        // alive).
        for t in 0..cfg.horizon {
            for d in 0..4 {
                let vals: Vec<f32> = elites.iter().map(|c| c.actions[t].to_array()[d]).collect();
                let m = vals.iter().sum::<f32>() / vals.len() as f32;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / vals.len() as f32;
                mean[t][d] = m;
                std[t][d] = var.sqrt().max(1e-3);
            }
        }
    }

    let best = elites
        .into_iter()
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .expect("population is nonempty");
    (best, elite_means)
}

/// Plan over explicit branch seeds; `None` is an unseeded branch.
pub fn plan_with<M: RolloutModel>(
    model: &M,
    branch_seeds: &[Option<(f32, f32)>],
    cfg: &PlanConfig,
    seed: u64,
) -> Result<PlanOutcome, PlanError> {
    cfg.validate()?;
    if branch_seeds.is_empty() {
        return Err(PlanError::InvalidConfig("no plan branches".into()));
    }
    let mut branch_returns = Vec::with_capacity(branch_seeds.len());
    let mut elite_means = Vec::with_capacity(branch_seeds.len());
    let mut best: Option<(usize, Candidate)> = None;
    for (b, &pick_seed) in branch_seeds.iter().enumerate() {
        let branch_seed = seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x6b70_706c;
        let (cand, means) = run_branch(model, cfg, pick_seed, branch_seed);
        branch_returns.push(cand.ret);
        elite_means.push(means);
        let replace = match &best {
            None => true,
            Some((_, incumbent)) => cand.ret > incumbent.ret,
        };
        if replace {
            best = Some((b, cand));
        }
    }
    let (branch, cand) = best.expect("at least one branch");
    Ok(PlanOutcome {
        action: cand.actions[0],
        diagnostics: PlanDiagnostics {
            branch_returns,
            elite_means,
            chosen: (branch, cand.iteration, cand.sample),
        },
    })
}

/// Plan from the live belief and keypoint graph. Branches are seeded at the
/// back-projected keypoint pixels (one unseeded branch under `plain_cem`).
/// Inputs are borrowed immutably; planning never mutates the live state.
pub fn plan(
    params: &DynamicsParams,
    belief: &Tensor,
    graph: &KeypointGraph,
    cfg: &PlanConfig,
    mode: RewardMode<'_>,
    seed: u64,
) -> Result<PlanOutcome, PlanError> {
    if graph.k() != params.cfg.keypoints {
        return Err(DynamicsError::KeypointMismatch {
            expected: params.cfg.keypoints,
            got: graph.k(),
        }
        .into());
    }
    let feats = Tensor::new(
        vec![graph.k(), graph.feat_dim],
        graph.features.clone(),
    );
    let model = DynamicsRollout {
        params,
        belief,
        feats: &feats,
        mode,
    };
    let branch_seeds: Vec<Option<(f32, f32)>> = if cfg.plain_cem {
        vec![None]
    } else {
        (0..graph.k())
            .map(|i| Some(graph.location_workspace(i)))
            .collect()
    };
    plan_with(&model, &branch_seeds, cfg, seed)
}

/// Advance the belief with one encoded observation and the executed action.
pub fn advance_belief(
    params: &DynamicsParams,
    belief: &Tensor,
    graph: &KeypointGraph,
    action: Action,
) -> Result<Tensor, DynamicsError> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let h = tape.constant(belief.clone());
    let feats = tape.constant(Tensor::new(
        vec![graph.k(), graph.feat_dim],
        graph.features.clone(),
    ));
    let nodes = model.embed_nodes(&mut tape, feats)?;
    let a = tape.constant(Tensor::new(vec![1, 4], action.to_array().to_vec()));
    let out = model.step(&mut tape, h, nodes, a)?;
    Ok(tape.value(out.belief).clone())
}

/// Closed-loop policy choice for evaluation runs.
pub enum EvalPolicy<'a> {
    Planned {
        params: &'a DynamicsParams,
        plan_cfg: &'a PlanConfig,
        mode: RewardMode<'a>,
    },
    Random,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeEval {
    pub seed: u64,
    pub best_reward: f32,
    pub success: bool,
    pub steps_to_success: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub success_rate: f32,
    pub mean_best_reward: f32,
    pub episodes: usize,
    pub per_episode: Vec<EpisodeEval>,
}

/// Closed-loop evaluation: at every environment step, detect keypoints,
/// plan, execute, and update the belief from the real observation. An
/// episode counts as a success as soon as the task's success predicate
/// holds. Episodes run in parallel and merge in episode order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    task: &TaskSpec,
    backend: &DetectorBackend,
    policy: &EvalPolicy<'_>,
    episodes: usize,
    seed: u64,
    sim_cfg: &SimConfig,
    width: usize,
    height: usize,
) -> Result<EvalOutcome, PlanError> {
    let results = exec::map_indexed(episodes, |i| {
        let ep_seed = episode_seed(seed, i);
        run_episode(task, backend, policy, ep_seed, sim_cfg, width, height)
    });
    let mut per_episode = Vec::with_capacity(episodes);
    for r in results {
        per_episode.push(r?);
    }
    let successes = per_episode.iter().filter(|e| e.success).count();
    let mean_best = if per_episode.is_empty() {
        0.0
    } else {
        per_episode.iter().map(|e| e.best_reward).sum::<f32>() / per_episode.len() as f32
    };
    Ok(EvalOutcome {
        success_rate: if episodes == 0 {
            0.0
        } else {
            successes as f32 / episodes as f32
        },
        mean_best_reward: mean_best,
        episodes,
        per_episode,
    })
}

fn run_episode(
    task: &TaskSpec,
    backend: &DetectorBackend,
    policy: &EvalPolicy<'_>,
    ep_seed: u64,
    sim_cfg: &SimConfig,
    width: usize,
    height: usize,
) -> Result<EpisodeEval, PlanError> {
    let mut state = reset(task, ep_seed, sim_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0x6576_616c);
    let mut belief = match policy {
        EvalPolicy::Planned { params, .. } => params.zero_belief(),
        EvalPolicy::Random => Tensor::zeros(vec![1, 1]),
    };
    let mut best = reward(&state, task)?;
    let mut success = is_success(&state, task)?;
    let mut steps_to_success = if success { Some(0) } else { None };

    for t in 0..task.max_steps {
        if success {
            break;
        }
        let image = render_depth(&state, width, height, sim_cfg);
        let action = match policy {
            EvalPolicy::Planned {
                params,
                plan_cfg,
                mode,
            } => {
                let graph = backend.keypoints(&image, params.cfg.keypoints)?;
                let outcome = plan(
                    params,
                    &belief,
                    &graph,
                    plan_cfg,
                    *mode,
                    ep_seed.wrapping_add(t as u64),
                )?;
                belief = advance_belief(params, &belief, &graph, outcome.action)?;
                outcome.action
            }
            EvalPolicy::Random => {
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
        };
        state = step(&state, action, sim_cfg);
        let r = reward(&state, task)?;
        best = best.max(r);
        if is_success(&state, task)? {
            success = true;
            steps_to_success = Some(t + 1);
        }
    }
    Ok(EpisodeEval {
        seed: ep_seed,
        best_reward: best,
        success,
        steps_to_success,
    })
}

/// Signature of the evaluation setup, embedded in reports.
pub fn eval_config_hash(
    sim_cfg: &SimConfig,
    task: &TaskSpec,
    width: usize,
    height: usize,
) -> String {
    config_hash(sim_cfg, task.id, width, height)
}
