//! Encoder separability probe.

use kpdyn_core::keypoint::DetectorBackend;
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, encode_rollouts, Policy};

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let rollouts = collect(&task, 10, Policy::Random, 55, &sim_cfg, 64, 64);
    let encoded = encode_rollouts(&rollouts, &DetectorBackend::geometric(), 3).unwrap();

    // Raw feature stats across all frames.
    let mut all: Vec<&Vec<f32>> = Vec::new();
    for ep in &encoded {
        for f in &ep.feats {
            all.push(f);
        }
    }
    let dim = all[0].len();
    let n = all.len();
    for d in 0..dim {
        let mean = all.iter().map(|f| f[d] as f64).sum::<f64>() / n as f64;
        let var = all.iter().map(|f| (f[d] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        println!("feat[{d}]: mean {mean:.6} std {:.6}", var.sqrt());
    }

    // Distances between raw feature vectors: same-episode adjacent vs cross-episode.
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut adjacent = Vec::new();
    for ep in &encoded {
        for w in ep.feats.windows(2) {
            adjacent.push(dist(&w[0], &w[1]));
        }
    }
    let mut cross = Vec::new();
    for i in 0..encoded[0].feats.len() {
        cross.push(dist(&encoded[0].feats[i], &encoded[1].feats[i]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean adjacent-frame distance: {:.6}", mean(&adjacent));
    println!("mean cross-episode distance:  {:.6}", mean(&cross));
    println!("frames: {n}, dim {dim}");
}
