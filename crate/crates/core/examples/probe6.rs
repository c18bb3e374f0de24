//! Detector escape study at 32x32: lr sweep, longer training.

use std::time::Instant;

use kpdyn_core::keypoint::{train_detector, DetectorBackend, DetectorParams};
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, encode_rollouts, Policy};

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let (w, h) = (32, 32);
    let rollouts = collect(&task, 80, Policy::Random, 100, &sim_cfg, w, h);
    let zero_loss: f32 = {
        let mut total = 0.0;
        let mut count = 0;
        for ep in rollouts.iter().take(10) {
            for f in &ep.frames {
                total += f.image.pixels.iter().map(|v| v.abs()).sum::<f32>();
                count += f.image.pixels.len();
            }
        }
        total / count as f32
    };
    println!("zero-output baseline: {zero_loss:.5}");

    for lr in [1e-3f32, 3e-3] {
        let t0 = Instant::now();
        let params = DetectorParams::init(3, 42);
        let (params, report) = train_detector(&rollouts, params, 12, lr, 42).unwrap();
        println!(
            "lr {lr}: {:.0}s, losses {:?}",
            t0.elapsed().as_secs_f32(),
            report
                .epoch_loss
                .iter()
                .step_by(2)
                .map(|v| (v * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
        let backend = DetectorBackend::Learned(params);
        let enc = encode_rollouts(&rollouts[..10], &backend, 3).unwrap();
        // Temporal structure of order-invariant feature means.
        let d = backend.feat_dim();
        let set_mean = |f: &Vec<f32>| -> Vec<f32> {
            let mut out = vec![0.0f32; d];
            for i in 0..3 {
                for j in 0..d {
                    out[j] += f[i * d + j] / 3.0;
                }
            }
            out
        };
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
        };
        let (mut d1, mut dx) = (Vec::new(), Vec::new());
        for (e, ep) in enc.iter().enumerate() {
            let means: Vec<Vec<f32>> = ep.feats.iter().map(set_mean).collect();
            for t in 0..means.len() - 1 {
                d1.push(dist(&means[t], &means[t + 1]));
                let other = &enc[(e + 1) % enc.len()];
                dx.push(dist(&means[t], &set_mean(&other.feats[t])));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "  set-mean: adjacent {:.3e} cross {:.3e} ratio {:.2}",
            mean(&d1), mean(&dx), mean(&dx) / mean(&d1)
        );
    }
}
