//! Deterministic geometric detector: farthest-point sampling over the object
//! mask, with local depth statistics as features.

use super::{FeatureMap, Heatmap, KeypointError};
use crate::sim::DepthImage;

/// Feature channels: raw depth, 5x5 local mean, 5x5 local max.
pub const GEOMETRIC_CHANNELS: usize = 3;

const WINDOW: isize = 2; // 5x5 window half-extent

/// Detect `k` keypoints by farthest-point sampling over the nonzero mask,
/// seeded at the mask pixel nearest the mask centroid. The heatmap is one-hot
/// at the selected pixels (in grid cells when `stride > 1`); features are
/// local depth statistics over a grid downsampled by `stride`. Selection
/// depends on depth values only through the mask, so keypoint locations are
/// invariant to positive rescaling of the image.
///
/// A coarse feature grid makes the statistics far more informative: the
/// depth channel becomes cell coverage and the 5x5 window spans a real
/// neighborhood of the workspace instead of a few pixels.
pub fn detect_geometric(
    image: &DepthImage,
    k: usize,
    stride: usize,
) -> Result<(FeatureMap, Heatmap), KeypointError> {
    assert!(k >= 1, "k must be at least 1");
    assert!(stride >= 1, "stride must be at least 1");
    if image.width % stride != 0 || image.height % stride != 0 {
        return Err(KeypointError::BadImageSize {
            width: image.width,
            height: image.height,
            stride,
        });
    }
    let mask = image.nonzero_pixels();
    if mask.is_empty() {
        return Err(KeypointError::EmptyObservation);
    }

    let selected = farthest_point_sample(&mask, k);

    let (gh, gw) = (image.height / stride, image.width / stride);
    let mut heat = Heatmap::zeros(k, gh, gw);
    for (i, &(r, c)) in selected.iter().enumerate() {
        heat.channel_mut(i)[(r / stride) * gw + c / stride] = 1.0;
    }

    Ok((local_depth_stats(image, stride), heat))
}

/// Stride-average the depth image onto the feature grid. Background zeros
/// stay in the average, so a cell's value reflects how much object covers it.
fn pooled_depth(image: &DepthImage, stride: usize) -> Vec<f32> {
    let (gh, gw) = (image.height / stride, image.width / stride);
    let mut out = vec![0.0f32; gh * gw];
    let norm = (stride * stride) as f32;
    for r in 0..image.height {
        for c in 0..image.width {
            out[(r / stride) * gw + c / stride] += image.get(r, c) / norm;
        }
    }
    out
}

/// FPS over mask pixels. The seed is the mask pixel nearest the centroid;
/// each later point maximizes its distance to the selected set. All ties
/// resolve to the smallest row-major index. If the mask has fewer pixels
/// than `k`, selection continues deterministically with distance-zero picks.
fn farthest_point_sample(mask: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
    let cr = mask.iter().map(|&(r, _)| r as f64).sum::<f64>() / mask.len() as f64;
    let cc = mask.iter().map(|&(_, c)| c as f64).sum::<f64>() / mask.len() as f64;
    let d2 = |a: (usize, usize), b: (f64, f64)| {
        let dr = a.0 as f64 - b.0;
        let dc = a.1 as f64 - b.1;
        dr * dr + dc * dc
    };

    let mut seed = 0;
    for (i, &p) in mask.iter().enumerate() {
        if d2(p, (cr, cc)) < d2(mask[seed], (cr, cc)) {
            seed = i;
        }
    }

    let mut selected = vec![mask[seed]];
    let mut min_dist: Vec<f64> = mask
        .iter()
        .map(|&p| d2(p, (mask[seed].0 as f64, mask[seed].1 as f64)))
        .collect();
    while selected.len() < k {
        let mut best = 0;
        for i in 1..mask.len() {
            if min_dist[i] > min_dist[best] {
                best = i;
            }
        }
        let chosen = mask[best];
        selected.push(chosen);
        for (i, &p) in mask.iter().enumerate() {
            let d = d2(p, (chosen.0 as f64, chosen.1 as f64));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    selected
}

fn local_depth_stats(image: &DepthImage, stride: usize) -> FeatureMap {
    let (h, w) = (image.height / stride, image.width / stride);
    let depth = pooled_depth(image, stride);
    let mut phi = FeatureMap::zeros(GEOMETRIC_CHANNELS, h, w);
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0.0;
            let mut max = 0.0f32;
            for dr in -WINDOW..=WINDOW {
                for dc in -WINDOW..=WINDOW {
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    // Out-of-bounds counts as background zero, so the local
                    // mean is sensitive to mask shape near edges.
                    let v = if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        depth[rr as usize * w + cc as usize]
                    } else {
                        0.0
                    };
                    sum += v;
                    max = max.max(v);
                }
            }
            let count = (2 * WINDOW + 1).pow(2) as f32;
            phi.set(0, r, c, depth[r * w + c]);
            phi.set(1, r, c, sum / count);
            phi.set(2, r, c, max);
        }
    }
    phi
}
