//! Deterministic 2D position-based-dynamics simulator for rope and cloth.
//!
//! The workspace is the unit square; particles carry a height `z >= 0` so
//! folds stack and picks lift. Each environment step executes one
//! pick-and-place action: the pick snaps to the nearest particle within
//! `pick_radius`, that particle is carried along the straight segment to the
//! place point over `carry_substeps` PBD substeps, released, and the object
//! settles. A pick that touches no particle is a no-op that just settles.
//!
//! Everything is a pure function of `(state, action, config)`; states are
//! immutable values between steps, so independent episodes can run in
//! parallel freely.

mod render;
mod reward;
mod solver;

pub use render::{render_depth, DepthImage, DEPTH_BASE};
pub use reward::{covered_area, is_success, reward, rope_goal_points};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("task {task} does not match object kind {kind:?}")]
    TaskMismatch { task: TaskId, kind: ObjectKind },
    #[error("cloth-fold reward needs the initial pose captured at reset")]
    MissingFoldAnchor,
    #[error("unknown task id {0:?}")]
    UnknownTask(String),
}

/// Distance constraint between particles `i` and `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceConstraint {
    pub i: usize,
    pub j: usize,
    pub rest: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    Rope,
    Cloth { rows: usize, cols: usize },
}

/// Particle positions/velocities plus the constraint topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub positions: Vec<[f32; 3]>,
    pub velocities: Vec<[f32; 3]>,
    pub constraints: Vec<DistanceConstraint>,
    pub kind: ObjectKind,
    /// Initial flat pose, captured at reset for the fold task only.
    pub fold_anchor: Option<Vec<[f32; 3]>>,
}

impl ParticleState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest `|dist(i, j) - rest|` over all constraints.
    pub fn max_constraint_violation(&self) -> f32 {
        let mut worst = 0.0f32;
        for c in &self.constraints {
            let d = dist3(self.positions[c.i], self.positions[c.j]);
            worst = worst.max((d - c.rest).abs());
        }
        worst
    }
}

/// Pick-and-place action in normalized workspace coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub xs: f32,
    pub ys: f32,
    pub xg: f32,
    pub yg: f32,
}

impl Action {
    pub const ZERO: Action = Action {
        xs: 0.0,
        ys: 0.0,
        xg: 0.0,
        yg: 0.0,
    };

    pub fn new(xs: f32, ys: f32, xg: f32, yg: f32) -> Self {
        Self { xs, ys, xg, yg }
    }

    pub fn clamped(self) -> Self {
        Self {
            xs: self.xs.clamp(0.0, 1.0),
            ys: self.ys.clamp(0.0, 1.0),
            xg: self.xg.clamp(0.0, 1.0),
            yg: self.yg.clamp(0.0, 1.0),
        }
    }

    pub fn in_bounds(&self) -> bool {
        [self.xs, self.ys, self.xg, self.yg]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.xs, self.ys, self.xg, self.yg]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "rope-0")]
    Rope0,
    #[serde(rename = "rope-45")]
    Rope45,
    #[serde(rename = "rope-90")]
    Rope90,
    #[serde(rename = "rope-135")]
    Rope135,
    #[serde(rename = "cloth-flatten")]
    ClothFlatten,
    #[serde(rename = "cloth-fold")]
    ClothFold,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::Rope0,
        TaskId::Rope45,
        TaskId::Rope90,
        TaskId::Rope135,
        TaskId::ClothFlatten,
        TaskId::ClothFold,
    ];

    pub fn is_rope(self) -> bool {
        matches!(
            self,
            TaskId::Rope0 | TaskId::Rope45 | TaskId::Rope90 | TaskId::Rope135
        )
    }

    /// Goal-line angle for the rope tasks.
    pub fn angle_degrees(self) -> Option<f32> {
        match self {
            TaskId::Rope0 => Some(0.0),
            TaskId::Rope45 => Some(45.0),
            TaskId::Rope90 => Some(90.0),
            TaskId::Rope135 => Some(135.0),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s {
            "rope-0" => Ok(TaskId::Rope0),
            "rope-45" => Ok(TaskId::Rope45),
            "rope-90" => Ok(TaskId::Rope90),
            "rope-135" => Ok(TaskId::Rope135),
            "cloth-flatten" => Ok(TaskId::ClothFlatten),
            "cloth-fold" => Ok(TaskId::ClothFold),
            other => Err(SimError::UnknownTask(other.to_string())),
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskId::Rope0 => "rope-0",
            TaskId::Rope45 => "rope-45",
            TaskId::Rope90 => "rope-90",
            TaskId::Rope135 => "rope-135",
            TaskId::ClothFlatten => "cloth-flatten",
            TaskId::ClothFold => "cloth-fold",
        };
        f.write_str(s)
    }
}

/// Task plus its episode budget and success threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub success_threshold: f32,
    pub max_steps: usize,
}

impl TaskSpec {
    /// Thresholds are meant to come from `trainer::calibrate_threshold`; this
    /// constructor takes whatever the caller calibrated.
    pub fn new(id: TaskId, success_threshold: f32) -> Self {
        Self {
            id,
            success_threshold,
            max_steps: 20,
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        assert!(max_steps >= 1, "max_steps must be at least 1");
        self.max_steps = max_steps;
        self
    }
}

/// Simulator tuning. PBD is unconditionally stable at these step sizes, so
/// the defaults favor convergence over realism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f32,
    pub solver_iters: usize,
    pub damping: f32,
    /// Extra tangential damping for particles resting on the ground;
    /// stops released objects from coasting across the frictionless table.
    pub ground_friction: f32,
    pub contact_height: f32,
    pub gravity: f32,
    pub pick_radius: f32,
    pub lift_height: f32,
    pub carry_substeps: usize,
    pub settle_substeps: usize,
    pub constraint_tol: f32,
    pub rope_particles: usize,
    pub rope_length: f32,
    pub cloth_rows: usize,
    pub cloth_cols: usize,
    pub cloth_spacing: f32,
    /// Splat radius in pixels at a 64-wide image; scales with resolution.
    pub particle_radius_px: f32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 60.0,
            solver_iters: 30,
            damping: 0.98,
            ground_friction: 0.5,
            contact_height: 0.004,
            gravity: 9.8,
            pick_radius: 0.05,
            lift_height: 0.08,
            carry_substeps: 20,
            settle_substeps: 40,
            constraint_tol: 1e-3,
            rope_particles: 40,
            rope_length: 0.5,
            cloth_rows: 12,
            cloth_cols: 12,
            cloth_spacing: 0.03,
            particle_radius_px: 1.5,
        }
    }
}

pub(crate) fn dist3(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub(crate) fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

pub(crate) fn cloth_grid(
    rows: usize,
    cols: usize,
    spacing: f32,
    center: (f32, f32),
    angle: f32,
) -> Vec<[f32; 3]> {
    let (sin, cos) = angle.sin_cos();
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let lx = (c as f32 - (cols as f32 - 1.0) / 2.0) * spacing;
            let ly = (r as f32 - (rows as f32 - 1.0) / 2.0) * spacing;
            positions.push([
                center.0 + cos * lx - sin * ly,
                center.1 + sin * lx + cos * ly,
                0.0,
            ]);
        }
    }
    positions
}

pub(crate) fn cloth_constraints(rows: usize, cols: usize, spacing: f32) -> Vec<DistanceConstraint> {
    let idx = |r: usize, c: usize| r * cols + c;
    let diag = spacing * std::f32::consts::SQRT_2;
    let mut cs = Vec::new();
    // Structural 4-neighbor constraints first, then shear diagonals.
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            cs.push(DistanceConstraint {
                i: idx(r, c),
                j: idx(r, c + 1),
                rest: spacing,
            });
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            cs.push(DistanceConstraint {
                i: idx(r, c),
                j: idx(r + 1, c),
                rest: spacing,
            });
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            cs.push(DistanceConstraint {
                i: idx(r, c),
                j: idx(r + 1, c + 1),
                rest: diag,
            });
            cs.push(DistanceConstraint {
                i: idx(r, c + 1),
                j: idx(r + 1, c),
                rest: diag,
            });
        }
    }
    cs
}

/// Randomized initial configuration for a task, deterministic per seed.
pub fn reset(task: &TaskSpec, seed: u64, cfg: &SimConfig) -> ParticleState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = if task.id.is_rope() {
        reset_rope(&mut rng, cfg)
    } else {
        match task.id {
            TaskId::ClothFlatten => reset_cloth_flatten(&mut rng, cfg),
            TaskId::ClothFold => reset_cloth_fold(&mut rng, cfg),
            _ => unreachable!(),
        }
    };
    solver::settle(&mut state, cfg);
    for v in &mut state.velocities {
        *v = [0.0; 3];
    }
    if task.id == TaskId::ClothFold {
        state.fold_anchor = Some(state.positions.clone());
    }
    state
}

fn reset_rope(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> ParticleState {
    let n = cfg.rope_particles;
    let step = cfg.rope_length / (n as f32 - 1.0);
    let margin = 0.15;
    let mut positions = Vec::with_capacity(n);
    let mut p = [
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
        0.0,
    ];
    positions.push(p);
    let mut heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    for _ in 1..n {
        heading += rng.random_range(-0.55..0.55);
        let mut next = [p[0] + step * heading.cos(), p[1] + step * heading.sin(), 0.0];
        if !(margin..=1.0 - margin).contains(&next[0]) || !(margin..=1.0 - margin).contains(&next[1])
        {
            // Turn back toward the center; keeps the walk away from the walls
            // without breaking the fixed segment length.
            heading = (0.5 - p[1]).atan2(0.5 - p[0]) + rng.random_range(-0.4..0.4);
            next = [p[0] + step * heading.cos(), p[1] + step * heading.sin(), 0.0];
        }
        positions.push(next);
        p = next;
    }
    let constraints = (0..n - 1)
        .map(|i| DistanceConstraint {
            i,
            j: i + 1,
            rest: step,
        })
        .collect();
    ParticleState {
        velocities: vec![[0.0; 3]; positions.len()],
        positions,
        constraints,
        kind: ObjectKind::Rope,
        fold_anchor: None,
    }
}

fn reset_cloth_flatten(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> ParticleState {
    let (rows, cols, s) = (cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_spacing);
    let center = (rng.random_range(0.42..0.58), rng.random_range(0.42..0.58));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let mut positions = cloth_grid(rows, cols, s, center, angle);

    // Crumple by folding one side of a random crease line over the other,
    // stacking the moved layer slightly above.
    let folds = rng.random_range(2..=3usize);
    for f in 0..folds {
        let cx: f32 = positions.iter().map(|p| p[0]).sum::<f32>() / positions.len() as f32;
        let cy: f32 = positions.iter().map(|p| p[1]).sum::<f32>() / positions.len() as f32;
        let qx = cx + rng.random_range(-0.04..0.04);
        let qy = cy + rng.random_range(-0.04..0.04);
        let theta = rng.random_range(0.0..std::f32::consts::PI);
        let (nx, ny) = (-theta.sin(), theta.cos());
        let lift = 0.015 * (f as f32 + 1.0);
        for p in positions.iter_mut() {
            let d = (p[0] - qx) * nx + (p[1] - qy) * ny;
            if d > 0.0 {
                p[0] -= 2.0 * d * nx;
                p[1] -= 2.0 * d * ny;
                p[2] += lift;
            }
        }
    }
    for p in positions.iter_mut() {
        p[2] += rng.random_range(0.0..0.004);
    }

    ParticleState {
        velocities: vec![[0.0; 3]; positions.len()],
        positions,
        constraints: cloth_constraints(rows, cols, s),
        kind: ObjectKind::Cloth { rows, cols },
        fold_anchor: None,
    }
}

fn reset_cloth_fold(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> ParticleState {
    let (rows, cols, s) = (cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_spacing);
    let center = (rng.random_range(0.42..0.58), rng.random_range(0.42..0.58));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let positions = cloth_grid(rows, cols, s, center, angle);
    ParticleState {
        velocities: vec![[0.0; 3]; positions.len()],
        positions,
        constraints: cloth_constraints(rows, cols, s),
        kind: ObjectKind::Cloth { rows, cols },
        fold_anchor: None,
    }
}

/// Execute one pick-and-place action.
pub fn step(state: &ParticleState, action: Action, cfg: &SimConfig) -> ParticleState {
    let action = action.clamped();
    let mut next = state.clone();
    let pick = nearest_within(state, action.xs, action.ys, cfg.pick_radius);
    if let Some(idx) = pick {
        let start = state.positions[idx];
        for sub in 1..=cfg.carry_substeps {
            let frac = sub as f32 / cfg.carry_substeps as f32;
            let carried = [
                start[0] + (action.xg - start[0]) * frac,
                start[1] + (action.yg - start[1]) * frac,
                cfg.lift_height,
            ];
            solver::substep(&mut next, cfg, Some((idx, carried)));
        }
    }
    solver::settle(&mut next, cfg);
    next
}

/// Index of the closest particle within `radius` of `(x, y)` in the plane.
pub fn nearest_within(state: &ParticleState, x: f32, y: f32, radius: f32) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, p) in state.positions.iter().enumerate() {
        let d = ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt();
        if d <= radius && best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let task = TaskSpec::new(TaskId::Rope0, 0.0);
        let cfg = SimConfig::default();
        let a = reset(&task, 7, &cfg);
        let b = reset(&task, 7, &cfg);
        assert_eq!(a, b);
        let c = reset(&task, 8, &cfg);
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn rope_reset_satisfies_chain_constraints() {
        let task = TaskSpec::new(TaskId::Rope0, 0.0);
        let cfg = SimConfig::default();
        for seed in 0..10 {
            let state = reset(&task, seed, &cfg);
            assert_eq!(state.constraints.len(), cfg.rope_particles - 1);
            for (k, c) in state.constraints.iter().enumerate() {
                assert_eq!((c.i, c.j), (k, k + 1));
            }
            assert!(
                state.max_constraint_violation() <= cfg.constraint_tol,
                "seed {seed}: violation {}",
                state.max_constraint_violation()
            );
        }
    }

    #[test]
    fn noop_pick_settles_in_place() {
        let task = TaskSpec::new(TaskId::Rope0, 0.0);
        let cfg = SimConfig::default();
        let state = reset(&task, 3, &cfg);
        // Far corner; rope resets stay well inside the margin.
        let next = step(&state, Action::new(0.01, 0.01, 0.9, 0.9), &cfg);
        for (a, b) in state.positions.iter().zip(&next.positions) {
            assert!(dist3(*a, *b) < 1e-3);
        }
    }

    #[test]
    fn pick_and_replace_keeps_endpoint_near_start() {
        let task = TaskSpec::new(TaskId::Rope0, 0.0);
        let cfg = SimConfig::default();
        let state = reset(&task, 11, &cfg);
        let end = state.positions[0];
        let next = step(&state, Action::new(end[0], end[1], end[0], end[1]), &cfg);
        assert!(dist2(next.positions[0], end) <= cfg.pick_radius);
    }

    #[test]
    fn dragged_endpoint_lands_near_target() {
        let task = TaskSpec::new(TaskId::Rope0, 0.0);
        let cfg = SimConfig::default();
        for seed in [1, 2, 3] {
            let state = reset(&task, seed, &cfg);
            let end = state.positions[0];
            let target_x = (end[0] + 0.2).min(0.95);
            let next = step(&state, Action::new(end[0], end[1], target_x, end[1]), &cfg);
            assert!(
                (next.positions[0][0] - target_x).abs() < 0.05,
                "seed {seed}: endpoint x {} vs target {target_x}",
                next.positions[0][0]
            );
            assert!(next.max_constraint_violation() <= cfg.constraint_tol);
        }
    }

    #[test]
    fn crumpled_cloth_covers_less_than_flat() {
        let cfg = SimConfig::default();
        let flat_area = covered_area(
            &cloth_grid(cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_spacing, (0.5, 0.5), 0.0),
            0.75 * cfg.cloth_spacing,
        );
        let task = TaskSpec::new(TaskId::ClothFlatten, 0.0);
        for seed in 0..20 {
            let state = reset(&task, seed, &cfg);
            let area = covered_area(&state.positions, 0.75 * cfg.cloth_spacing);
            assert!(
                area < 0.9 * flat_area,
                "seed {seed}: crumpled area {area} vs flat {flat_area}"
            );
        }
    }

    #[test]
    fn task_id_round_trips_through_strings() {
        for id in TaskId::ALL {
            assert_eq!(TaskId::parse(&id.to_string()).unwrap(), id);
        }
        assert!(TaskId::parse("rope-30").is_err());
    }
}
