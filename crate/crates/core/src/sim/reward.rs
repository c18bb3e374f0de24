//! Ground-truth reward oracles, computed from simulator particle positions.

use super::{dist2, dist3, ObjectKind, ParticleState, SimError, TaskId, TaskSpec};

/// Resolution of the coverage raster used by the flatten reward and tests.
const AREA_GRID: usize = 256;

/// Weight of the wrinkle (mean height) penalty in the flatten reward.
const WRINKLE_WEIGHT: f32 = 0.5;

/// Weight of the stay-in-place anchor term in the fold reward.
const FOLD_ANCHOR_WEIGHT: f32 = 0.2;

/// Evenly spaced points on the centered goal line at `angle` radians, with
/// the same count and spacing as the rope.
pub fn rope_goal_points(n: usize, spacing: f32, angle: f32) -> Vec<[f32; 3]> {
    let (sin, cos) = angle.sin_cos();
    (0..n)
        .map(|i| {
            let offset = (i as f32 - (n as f32 - 1.0) / 2.0) * spacing;
            [0.5 + offset * cos, 0.5 + offset * sin, 0.0]
        })
        .collect()
}

/// Planar area covered by discs of `radius` around the particles, measured on
/// a fixed raster over the unit square.
pub fn covered_area(positions: &[[f32; 3]], radius: f32) -> f32 {
    let mut covered = vec![false; AREA_GRID * AREA_GRID];
    let scale = AREA_GRID as f32;
    let radius_px = radius * scale;
    for p in positions {
        let cx = p[0] * scale;
        let cy = p[1] * scale;
        let r0 = ((cy - radius_px).floor().max(0.0)) as usize;
        let r1 = ((cy + radius_px).ceil().min(scale)) as usize;
        let c0 = ((cx - radius_px).floor().max(0.0)) as usize;
        let c1 = ((cx + radius_px).ceil().min(scale)) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                let dx = c as f32 + 0.5 - cx;
                let dy = r as f32 + 0.5 - cy;
                if dx * dx + dy * dy <= radius_px * radius_px {
                    covered[r * AREA_GRID + c] = true;
                }
            }
        }
    }
    covered.iter().filter(|&&b| b).count() as f32 / (scale * scale)
}

fn rope_reward(state: &ParticleState, angle_deg: f32) -> f32 {
    let n = state.len();
    let spacing = state.constraints.first().map_or(0.0, |c| c.rest);
    let goal = rope_goal_points(n, spacing, angle_deg.to_radians());
    let fwd: f32 = state
        .positions
        .iter()
        .zip(&goal)
        .map(|(p, g)| dist3(*p, *g))
        .sum::<f32>()
        / n as f32;
    let rev: f32 = state
        .positions
        .iter()
        .zip(goal.iter().rev())
        .map(|(p, g)| dist3(*p, *g))
        .sum::<f32>()
        / n as f32;
    // A rope has no orientation; score against the better endpoint ordering.
    -fwd.min(rev)
}

fn flatten_reward(state: &ParticleState, rows: usize, cols: usize) -> f32 {
    let spacing = state.constraints.first().map_or(0.0, |c| c.rest);
    // Discs of 0.75 * spacing fully tile the grid cells (the half-diagonal is
    // ~0.707 * spacing), so a flat pose always reaches the reference area.
    let radius = 0.75 * spacing;
    let flat = super::cloth_grid(rows, cols, spacing, (0.5, 0.5), 0.0);
    let reference = covered_area(&flat, radius);
    let area = covered_area(&state.positions, radius);
    let ratio = (area / reference).min(1.0);
    let mean_z: f32 = state.positions.iter().map(|p| p[2]).sum::<f32>() / state.len() as f32;
    (ratio - WRINKLE_WEIGHT * mean_z).clamp(0.0, 1.0)
}

fn fold_reward(state: &ParticleState, rows: usize, cols: usize) -> Result<f32, SimError> {
    let anchor = state
        .fold_anchor
        .as_ref()
        .ok_or(SimError::MissingFoldAnchor)?;
    let idx = |r: usize, c: usize| r * cols + c;
    let half = cols / 2;
    let mut best = f32::INFINITY;
    for moved_left in [true, false] {
        let mut pair = 0.0;
        let mut pairs = 0usize;
        let mut hold = 0.0;
        let mut held = 0usize;
        for r in 0..rows {
            for c in 0..half {
                let (i, j) = (idx(r, c), idx(r, cols - 1 - c));
                let (moved, stays) = if moved_left { (i, j) } else { (j, i) };
                pair += dist2(state.positions[moved], state.positions[stays]);
                pairs += 1;
                hold += dist3(state.positions[stays], anchor[stays]);
                held += 1;
            }
        }
        let mismatch = pair / pairs as f32 + FOLD_ANCHOR_WEIGHT * hold / held as f32;
        best = best.min(mismatch);
    }
    Ok(-best)
}

/// Distance-to-goal reward. Rope and fold rewards are always <= 0 with 0 at
/// the goal; the flatten reward is the covered-area fraction minus a wrinkle
/// penalty, in `[0, 1]`.
pub fn reward(state: &ParticleState, task: &TaskSpec) -> Result<f32, SimError> {
    match (task.id, state.kind) {
        (id, ObjectKind::Rope) if id.is_rope() => {
            Ok(rope_reward(state, id.angle_degrees().expect("rope task")))
        }
        (TaskId::ClothFlatten, ObjectKind::Cloth { rows, cols }) => {
            Ok(flatten_reward(state, rows, cols))
        }
        (TaskId::ClothFold, ObjectKind::Cloth { rows, cols }) => fold_reward(state, rows, cols),
        (id, kind) => Err(SimError::TaskMismatch { task: id, kind }),
    }
}

pub fn is_success(state: &ParticleState, task: &TaskSpec) -> Result<bool, SimError> {
    Ok(reward(state, task)? >= task.success_threshold)
}
