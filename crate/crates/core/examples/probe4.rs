//! Transporter lane, longer budget, with distance diagnostics.

use std::time::Instant;

use kpdyn_core::autodiff::{Tape, Tensor};
use kpdyn_core::dynamics::{DynamicsParams, ModelConfig};
use kpdyn_core::keypoint::{train_detector, DetectorBackend, DetectorParams};
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{
    collect, encode_rollouts, top1_accuracy, train, EncodedEpisode, Policy, TrainConfig,
};

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over keypoints of the raw features: an order-invariant summary.
fn set_mean(feats: &[f32], k: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; d];
    for i in 0..k {
        for j in 0..d {
            out[j] += feats[i * d + j] / k as f32;
        }
    }
    out
}

fn unroll_diag(params: &DynamicsParams, heldout: &[EncodedEpisode], ctx_len: usize) {
    // Encode all pooled states.
    let mut pooled: Vec<Vec<Vec<f32>>> = Vec::new();
    for ep in heldout {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let mut per = Vec::new();
        for f in 0..ep.len() {
            let feats = tape.constant(ep.feats_tensor(f));
            let (_, p) = model.encode(&mut tape, feats).unwrap();
            per.push(tape.value(p).data().to_vec());
        }
        pooled.push(per);
    }
    let mut d_pos = Vec::new();
    let mut d_neg = Vec::new();
    for (e, ep) in heldout.iter().enumerate() {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let mut h = tape.constant(Tensor::zeros(vec![1, model.cfg.belief_dim]));
        let mut nodes = {
            let f = tape.constant(ep.feats_tensor(0));
            model.embed_nodes(&mut tape, f).unwrap()
        };
        for t in 0..ep.len() - 1 {
            let a = tape.constant(Tensor::new(vec![1, 4], ep.actions[t].to_vec()));
            let out = model.step(&mut tape, h, nodes, a).unwrap();
            h = out.belief;
            nodes = if t + 1 >= ctx_len {
                out.nodes_pred
            } else {
                let f = tape.constant(ep.feats_tensor(t + 1));
                model.embed_nodes(&mut tape, f).unwrap()
            };
            if t + 1 >= ctx_len {
                let pred = tape.value(out.pooled).data().to_vec();
                d_pos.push(dist(&pred, &pooled[e][t + 1]));
                let other = (e + 1) % heldout.len();
                let frame = (t * 7 + 3) % pooled[other].len();
                d_neg.push(dist(&pred, &pooled[other][frame]));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "  mean d_pos {:.4}, mean d_neg {:.4} (ratio {:.3})",
        mean(&d_pos),
        mean(&d_neg),
        mean(&d_neg) / mean(&d_pos)
    );
}

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let (w, h) = (64, 64);
    let k = 3;

    let t0 = Instant::now();
    let rollouts = collect(&task, 300, Policy::Random, 100, &sim_cfg, w, h);
    let held_rollouts = collect(&task, 40, Policy::Random, 900_000, &sim_cfg, w, h);
    println!("collect: {:.1}s", t0.elapsed().as_secs_f32());
    let detector_epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    println!("detector epochs: {detector_epochs}");

    let t0 = Instant::now();
    let params = DetectorParams::init(k, 42);
    let (params, report) = train_detector(&rollouts[..150], params, detector_epochs, 1e-3, 42).unwrap();
    println!(
        "detector: {:.1}s, losses {:?}",
        t0.elapsed().as_secs_f32(),
        report.epoch_loss
    );

    let backend = DetectorBackend::Learned(params);
    let encoded = encode_rollouts(&rollouts, &backend, k).unwrap();
    let heldout = encode_rollouts(&held_rollouts, &backend, k).unwrap();

    // Temporal structure of set-invariant raw features.
    let d = backend.feat_dim();
    let mut d1 = Vec::new();
    let mut d5 = Vec::new();
    let mut dx = Vec::new();
    for (e, ep) in encoded.iter().enumerate().take(20) {
        let means: Vec<Vec<f32>> = ep.feats.iter().map(|f| set_mean(f, k, d)).collect();
        for t in 0..means.len() - 5 {
            d1.push(dist(&means[t], &means[t + 1]));
            d5.push(dist(&means[t], &means[t + 5]));
            let other = &encoded[(e + 1) % 20];
            dx.push(dist(
                &means[t],
                &set_mean(&other.feats[t], k, d),
            ));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "set-mean distances: t+1 {:.3e}, t+5 {:.3e}, cross {:.3e}",
        mean(&d1),
        mean(&d5),
        mean(&dx)
    );

    let model_cfg = ModelConfig::new(k, d);
    let cfg = TrainConfig {
        epochs: 50,
        ..Default::default()
    };
    let untrained = DynamicsParams::init(model_cfg, 1);
    println!(
        "untrained top-1: {:.4}",
        top1_accuracy(&untrained, &heldout, 50, 20, cfg.context_len, 7).unwrap()
    );

    let t0 = Instant::now();
    let outcome = train(&encoded, &cfg, model_cfg, 1).unwrap();
    println!(
        "dynamics 50 epochs: {:.1}s; L_D {:?}",
        t0.elapsed().as_secs_f32(),
        outcome
            .curve
            .iter()
            .step_by(8)
            .map(|s| s.dynamics_loss)
            .collect::<Vec<_>>()
    );
    println!(
        "trained top-1: {:.4}",
        top1_accuracy(&outcome.params, &heldout, 50, 20, cfg.context_len, 7).unwrap()
    );
    unroll_diag(&outcome.params, &heldout, cfg.context_len);
}
