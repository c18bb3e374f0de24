//! Transporter-lane probe: detector training on rope data, feature
//! separability, downstream top-1.

use std::time::Instant;

use kpdyn_core::dynamics::ModelConfig;
use kpdyn_core::keypoint::{train_detector, DetectorBackend, DetectorParams};
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, encode_rollouts, top1_accuracy, train, Policy, TrainConfig};

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let (w, h) = (64, 64);
    let k = 3;

    let t0 = Instant::now();
    let rollouts = collect(&task, 100, Policy::Random, 100, &sim_cfg, w, h);
    let held_rollouts = collect(&task, 25, Policy::Random, 900_000, &sim_cfg, w, h);
    println!("collect: {:.1}s", t0.elapsed().as_secs_f32());

    let t0 = Instant::now();
    let params = DetectorParams::init(k, 42);
    let (params, report) = train_detector(&rollouts, params, 2, 1e-3, 42).unwrap();
    println!(
        "detector 2 epochs: {:.1}s, losses {:?}",
        t0.elapsed().as_secs_f32(),
        report.epoch_loss
    );

    // Keypoint sanity: where do detections land relative to the mask?
    let backend = DetectorBackend::Learned(params);
    for (i, ep) in rollouts.iter().take(2).enumerate() {
        let img = &ep.frames[0].image;
        let graph = backend.keypoints(img, k).unwrap();
        let mask = img.nonzero_pixels();
        let (r_min, r_max) = mask.iter().fold((usize::MAX, 0), |(lo, hi), &(r, _)| {
            (lo.min(r), hi.max(r))
        });
        let (c_min, c_max) = mask.iter().fold((usize::MAX, 0), |(lo, hi), &(_, c)| {
            (lo.min(c), hi.max(c))
        });
        println!(
            "ep {i}: mask bbox rows {r_min}..{r_max} cols {c_min}..{c_max}, keypoints {:?}",
            graph.locations
        );
    }

    let t0 = Instant::now();
    let encoded = encode_rollouts(&rollouts[..60], &backend, k).unwrap();
    let heldout = encode_rollouts(&held_rollouts, &backend, k).unwrap();
    println!("encode: {:.1}s", t0.elapsed().as_secs_f32());

    // Separability of raw features.
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut adjacent = Vec::new();
    for ep in &encoded {
        for pair in ep.feats.windows(2) {
            adjacent.push(dist(&pair[0], &pair[1]));
        }
    }
    let mut cross = Vec::new();
    for i in 0..encoded[0].feats.len() {
        cross.push(dist(&encoded[0].feats[i], &encoded[1].feats[i]));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "adjacent {:.6e} vs cross-episode {:.6e} (ratio {:.2})",
        mean(&adjacent),
        mean(&cross),
        mean(&cross) / mean(&adjacent)
    );

    let model_cfg = ModelConfig::new(k, backend.feat_dim());
    let cfg = TrainConfig {
        epochs: 15,
        ..Default::default()
    };
    let untrained = kpdyn_core::dynamics::DynamicsParams::init(model_cfg, 1);
    let chance = top1_accuracy(&untrained, &heldout, 50, 20, cfg.context_len, 7).unwrap();
    println!("untrained top-1: {:.4}", chance);

    let t0 = Instant::now();
    let outcome = train(&encoded, &cfg, model_cfg, 1).unwrap();
    println!(
        "dynamics 15 epochs: {:.1}s; L_D first {:.3} last {:.3}",
        t0.elapsed().as_secs_f32(),
        outcome.curve.first().unwrap().dynamics_loss,
        outcome.curve.last().unwrap().dynamics_loss
    );
    let acc = top1_accuracy(&outcome.params, &heldout, 50, 20, cfg.context_len, 7).unwrap();
    println!("trained top-1: {:.4}", acc);
}
