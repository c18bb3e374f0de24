//! Position-based dynamics: integrate, project constraints, derive velocities.

use super::{ParticleState, SimConfig};

const WALL_MIN: f32 = -0.1;
const WALL_MAX: f32 = 1.1;
const Z_MAX: f32 = 0.5;

fn clamp_bounds(p: &mut [f32; 3]) {
    p[0] = p[0].clamp(WALL_MIN, WALL_MAX);
    p[1] = p[1].clamp(WALL_MIN, WALL_MAX);
    p[2] = p[2].clamp(0.0, Z_MAX);
}

/// One PBD substep. `attachment` pins a particle to a kinematic target
/// (zero inverse mass) for the carry phase of a pick.
pub fn substep(state: &mut ParticleState, cfg: &SimConfig, attachment: Option<(usize, [f32; 3])>) {
    let n = state.positions.len();
    let attached = attachment.map(|(i, _)| i);

    let mut predicted = state.positions.clone();
    for i in 0..n {
        if attached == Some(i) {
            continue;
        }
        let grounded = state.positions[i][2] <= cfg.contact_height;
        let v = &mut state.velocities[i];
        v[2] -= cfg.gravity * cfg.dt;
        for c in v.iter_mut() {
            *c *= cfg.damping;
        }
        if grounded {
            v[0] *= cfg.ground_friction;
            v[1] *= cfg.ground_friction;
        }
        predicted[i][0] += state.velocities[i][0] * cfg.dt;
        predicted[i][1] += state.velocities[i][1] * cfg.dt;
        predicted[i][2] += state.velocities[i][2] * cfg.dt;
    }
    if let Some((i, target)) = attachment {
        predicted[i] = target;
    }

    for _ in 0..cfg.solver_iters {
        project_once(&mut predicted, state, attached);
        for (i, p) in predicted.iter_mut().enumerate() {
            if attached == Some(i) {
                continue;
            }
            clamp_bounds(p);
        }
    }

    for i in 0..n {
        if attached == Some(i) {
            state.velocities[i] = [0.0; 3];
        } else {
            for k in 0..3 {
                state.velocities[i][k] = (predicted[i][k] - state.positions[i][k]) / cfg.dt;
            }
        }
    }
    state.positions = predicted;
}

fn project_once(predicted: &mut [[f32; 3]], state: &ParticleState, attached: Option<usize>) {
    for c in &state.constraints {
        let wi = if attached == Some(c.i) { 0.0 } else { 1.0 };
        let wj = if attached == Some(c.j) { 0.0 } else { 1.0 };
        let wsum = wi + wj;
        if wsum == 0.0 {
            continue;
        }
        let (pi, pj) = (predicted[c.i], predicted[c.j]);
        let dx = pi[0] - pj[0];
        let dy = pi[1] - pj[1];
        let dz = pi[2] - pj[2];
        let dist = (dx * dx + dy * dy + dz * dz).sqrt();
        if dist < 1e-9 {
            continue;
        }
        let scale = (dist - c.rest) / (dist * wsum);
        let (ci, cj) = (wi * scale, wj * scale);
        predicted[c.i][0] -= ci * dx;
        predicted[c.i][1] -= ci * dy;
        predicted[c.i][2] -= ci * dz;
        predicted[c.j][0] += cj * dx;
        predicted[c.j][1] += cj * dy;
        predicted[c.j][2] += cj * dz;
    }
}

/// Free substeps after a release (or a no-op pick), then position-only
/// projection passes until the constraint tolerance holds. The extra passes
/// move points by far less than the tolerance, so they do not disturb the
/// settled pose; velocities are left as the substeps produced them.
pub fn settle(state: &mut ParticleState, cfg: &SimConfig) {
    for _ in 0..cfg.settle_substeps {
        substep(state, cfg, None);
    }
    for _ in 0..400 {
        if state.max_constraint_violation() <= 0.5 * cfg.constraint_tol {
            break;
        }
        let mut predicted = state.positions.clone();
        project_once(&mut predicted, state, None);
        for p in predicted.iter_mut() {
            clamp_bounds(p);
        }
        state.positions = predicted;
    }
}
