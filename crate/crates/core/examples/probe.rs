//! Scratch pipeline probe (timing + top-1 накопление); not part of the suite.

use std::time::Instant;

use kpdyn_core::dynamics::ModelConfig;
use kpdyn_core::keypoint::DetectorBackend;
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, encode_rollouts, top1_accuracy, train, Policy, TrainConfig};

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let (w, h) = (64, 64);
    let k = 3;

    let t0 = Instant::now();
    let train_rollouts = collect(&task, 300, Policy::Random, 100, &sim_cfg, w, h);
    let held_rollouts = collect(&task, 40, Policy::Random, 900_000, &sim_cfg, w, h);
    println!("collect: {:.1}s", t0.elapsed().as_secs_f32());

    let backend = DetectorBackend::geometric();
    let t0 = Instant::now();
    let encoded = encode_rollouts(&train_rollouts, &backend, k).unwrap();
    let heldout = encode_rollouts(&held_rollouts, &backend, k).unwrap();
    println!("encode: {:.1}s", t0.elapsed().as_secs_f32());

    let model_cfg = ModelConfig::new(k, backend.feat_dim());
    let cfg = TrainConfig {
        epochs: 50,
        ..Default::default()
    };

    let untrained = kpdyn_core::dynamics::DynamicsParams::init(model_cfg, 1);
    let chance = top1_accuracy(&untrained, &heldout, 50, 20, cfg.context_len, 7).unwrap();
    println!("untrained top-1 (expect ~{:.4}): {:.4}", 1.0 / 51.0, chance);

    let t0 = Instant::now();
    let outcome = train(&encoded, &cfg, model_cfg, 1).unwrap();
    println!(
        "train {} epochs: {:.1}s ({:.2}s/epoch)",
        cfg.epochs,
        t0.elapsed().as_secs_f32(),
        t0.elapsed().as_secs_f32() / cfg.epochs as f32
    );
    for stats in outcome.curve.iter().step_by(10) {
        println!(
            "  epoch {}: L_D {:.4} L_R {:.6} L {:.4}",
            stats.epoch, stats.dynamics_loss, stats.reward_loss, stats.total
        );
    }

    let t0 = Instant::now();
    let acc = top1_accuracy(&outcome.params, &heldout, 50, 20, cfg.context_len, 7).unwrap();
    println!("trained top-1: {:.4} ({:.1}s)", acc, t0.elapsed().as_secs_f32());
}
