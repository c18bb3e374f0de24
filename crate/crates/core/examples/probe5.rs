//! Heatmap sharpness + mask saturation probe.

use kpdyn_core::keypoint::{keypoint_mask, train_detector, DetectorBackend, DetectorParams};
use kpdyn_core::sim::{SimConfig, TaskId, TaskSpec};
use kpdyn_core::trainer::{collect, Policy};

fn mask_stats(params: &DetectorParams, img: &kpdyn_core::sim::DepthImage) -> (f32, f32, f32) {
    let (_, heat) = params.detect(img).unwrap();
    let mask = keypoint_mask(&heat);
    let mean = mask.iter().sum::<f32>() / mask.len() as f32;
    let peak = heat.channel(0).iter().copied().fold(0.0f32, f32::max);
    let uniform = 1.0 / (heat.height * heat.width) as f32;
    (mean, peak, uniform)
}

fn main() {
    let sim_cfg = SimConfig::default();
    let task = TaskSpec::new(TaskId::Rope0, 0.0);
    let rollouts = collect(&task, 60, Policy::Random, 100, &sim_cfg, 64, 64);

    let params = DetectorParams::init(3, 42);
    let img = &rollouts[0].frames[0].image;
    let (mean, peak, uniform) = mask_stats(&params, img);
    println!("init: mask mean {mean:.3}, ch0 peak {peak:.4} (uniform {uniform:.4})");

    let (params, report) = train_detector(&rollouts, params, 5, 1e-3, 42).unwrap();
    println!("losses: {:?}", report.epoch_loss);
    let (mean, peak, _) = mask_stats(&params, img);
    println!("after: mask mean {mean:.3}, ch0 peak {peak:.4}");
    let backend = DetectorBackend::Learned(params);
    for t in [0usize, 5, 10] {
        let g = backend.keypoints(&rollouts[1].frames[t].image, 3).unwrap();
        println!("frame {t}: keypoints {:?}", g.locations);
    }
}
