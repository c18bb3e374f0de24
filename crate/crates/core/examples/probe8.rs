//! Conditional predictability of features, measured without any model:
//! k-nearest-neighbor prediction over (state summary, action) pairs.

use kpdyn_core::keypoint::DetectorBackend;
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, encode_rollouts, Policy};

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let rollouts = collect(&task, 200, Policy::Random, 100, &sim_cfg, 64, 64);
    let stride: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4);
    println!("stride {stride}");
    let encoded = encode_rollouts(
        &rollouts,
        &DetectorBackend::Geometric { stride },
        3,
    )
    .unwrap();
    let d = 3usize;
    let k = 3usize;

    // Order-invariant per-frame summary: per-dim mean and std over keypoints.
    let summarize = |feats: &Vec<f32>| -> Vec<f64> {
        let mut out = vec![0.0f64; 2 * d];
        for dim in 0..d {
            let vals: Vec<f64> = (0..k).map(|i| feats[i * d + dim] as f64).collect();
            let m = vals.iter().sum::<f64>() / k as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k as f64;
            out[dim] = m;
            out[d + dim] = v.sqrt();
        }
        out
    };

    // Standardize summaries globally.
    let mut all: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (e, ep) in encoded.iter().enumerate() {
        for (t, f) in ep.feats.iter().enumerate() {
            all.push((e, t, summarize(f)));
        }
    }
    let dim = 2 * d;
    let mut mean = vec![0.0; dim];
    for (_, _, s) in &all {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / all.len() as f64;
        }
    }
    let mut std = vec![0.0; dim];
    for (_, _, s) in &all {
        for (j, v) in s.iter().enumerate() {
            std[j] += (v - mean[j]).powi(2) / all.len() as f64;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-12);
    }
    let z: Vec<(usize, usize, Vec<f64>)> = all
        .iter()
        .map(|(e, t, s)| {
            (
                *e,
                *t,
                s.iter()
                    .zip(mean.iter().zip(&std))
                    .map(|(v, (m, sd))| (v - m) / sd)
                    .collect(),
            )
        })
        .collect();
    let lookup = |e: usize, t: usize| -> &Vec<f64> {
        &z.iter().find(|(ze, zt, _)| *ze == e && *zt == t).unwrap().2
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    // Transitions: (e, t) -> (e, t+1) with the action appended (weighted).
    struct Transition {
        query: Vec<f64>,
        next: Vec<f64>,
    }
    let mut transitions = Vec::new();
    for (e, ep) in encoded.iter().enumerate() {
        for t in 0..ep.len() - 1 {
            let mut q = lookup(e, t).clone();
            for a in ep.actions[t] {
                q.push(a as f64 * 2.0);
            }
            transitions.push(Transition {
                query: q,
                next: lookup(e, t + 1).clone(),
            });
        }
    }
    println!("transitions: {}", transitions.len());

    // kNN evaluation on a held-out slice.
    let m = 5;
    let mut knn_err = Vec::new();
    let mut identity_err = Vec::new();
    let mut random_err = Vec::new();
    for probe_idx in (0..transitions.len()).step_by(37).take(300) {
        let probe = &transitions[probe_idx];
        let mut best: Vec<(f64, usize)> = Vec::new();
        for (j, tr) in transitions.iter().enumerate() {
            if j.abs_diff(probe_idx) < 25 {
                continue; // skip the same episode neighborhood
            }
            let dq = dist(&probe.query, &tr.query);
            best.push((dq, j));
        }
        best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut pred = vec![0.0f64; dim];
        for &(_, j) in best.iter().take(m) {
            for (p, v) in pred.iter_mut().zip(&transitions[j].next) {
                *p += v / m as f64;
            }
        }
        knn_err.push(dist(&pred, &probe.next));
        identity_err.push(dist(&probe.query[..dim], &probe.next));
        let rnd = &transitions[(probe_idx * 7919 + 13) % transitions.len()].next;
        random_err.push(dist(rnd, &probe.next));
    }
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "kNN err {:.3} | identity err {:.3} | random-state err {:.3}",
        mean_of(&knn_err),
        mean_of(&identity_err),
        mean_of(&random_err)
    );
}
