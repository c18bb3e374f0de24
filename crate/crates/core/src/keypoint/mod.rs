//! Keypoint detection on depth images and keypoint-graph construction.
//!
//! Two detector backends share one contract: produce a feature map `phi` and
//! a per-keypoint heatmap, from which [`extract_keypoints`] builds the graph
//! observation. The geometric backend is deterministic and training-free
//! (farthest-point sampling over the object mask with local depth
//! statistics); the learned backend is a small transporter-style conv stack
//! trained by image reconstruction in [`transporter`].

mod geometric;
pub mod transporter;

pub use geometric::detect_geometric;
pub use transporter::{train_detector, DetectorParams, TrainDetectorReport};

use thiserror::Error;

use crate::sim::DepthImage;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("empty observation: the depth image has no object pixels")]
    EmptyObservation,
    #[error("{context}: shape mismatch ({detail})")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },
    #[error("image {width}x{height} is not divisible by the encoder stride {stride}")]
    BadImageSize {
        width: usize,
        height: usize,
        stride: usize,
    },
    #[error("dataset is empty or has no episode with at least 2 frames")]
    EmptyDataset,
    #[error(transparent)]
    Tape(#[from] crate::autodiff::TapeError),
}

/// Spatial feature grid, `[channels, height, width]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }
}

/// Per-keypoint spatial attention, `[k, height, width]`; every channel is
/// nonnegative and sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        Self {
            k,
            height,
            width,
            data: vec![0.0; k * height * width],
        }
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[i * hw..(i + 1) * hw]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[i * hw..(i + 1) * hw]
    }

    /// Largest per-channel deviation of the channel sum from one.
    pub fn normalization_error(&self) -> f32 {
        (0..self.k)
            .map(|i| (self.channel(i).iter().sum::<f32>() - 1.0).abs())
            .fold(0.0, f32::max)
    }
}

/// Graph observation: `k` keypoints with pixel locations and feature
/// vectors, fully connected (self-loops excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointGraph {
    /// `(row, col)` pixel coordinates in the source image.
    pub locations: Vec<(usize, usize)>,
    /// Flattened `k x feat_dim` feature matrix.
    pub features: Vec<f32>,
    pub feat_dim: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl KeypointGraph {
    pub fn k(&self) -> usize {
        self.locations.len()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    /// Directed edge list of the complete graph, self-loops excluded.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k();
        (0..k).flat_map(move |i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    /// Workspace coordinates of keypoint `i`'s pixel center.
    pub fn location_workspace(&self, i: usize) -> (f32, f32) {
        let (row, col) = self.locations[i];
        (
            (col as f32 + 0.5) / self.image_width as f32,
            (row as f32 + 0.5) / self.image_height as f32,
        )
    }
}

/// Pool heatmap-weighted features into per-keypoint vectors and take each
/// channel's argmax as the keypoint location.
///
/// `v_i[c]` is the mean over all grid cells of `H_i * phi_c`; argmax ties
/// resolve to the smallest row-major index. Locations are in the heatmap's
/// own grid; [`DetectorBackend::keypoints`] rescales them to image pixels.
pub fn extract_keypoints(phi: &FeatureMap, heat: &Heatmap) -> Result<KeypointGraph, KeypointError> {
    if phi.height != heat.height || phi.width != heat.width {
        return Err(KeypointError::ShapeMismatch {
            context: "extract_keypoints",
            detail: format!(
                "feature grid {}x{} vs heatmap {}x{}",
                phi.height, phi.width, heat.height, heat.width
            ),
        });
    }
    let hw = heat.height * heat.width;
    let mut locations = Vec::with_capacity(heat.k);
    let mut features = Vec::with_capacity(heat.k * phi.channels);
    for i in 0..heat.k {
        let h = heat.channel(i);
        let mut best = 0;
        for (p, &v) in h.iter().enumerate() {
            if v > h[best] {
                best = p;
            }
        }
        locations.push((best / heat.width, best % heat.width));
        for c in 0..phi.channels {
            let phi_c = &phi.data[c * hw..(c + 1) * hw];
            let sum: f32 = h.iter().zip(phi_c).map(|(&hv, &fv)| hv * fv).sum();
            features.push(sum / hw as f32);
        }
    }
    Ok(KeypointGraph {
        locations,
        features,
        feat_dim: phi.channels,
        image_width: heat.width,
        image_height: heat.height,
    })
}

/// Keypoint-region mask: per-channel heatmaps rescaled to peak one, summed,
/// clamped to `[0, 1]`. All-zero channels contribute nothing.
pub fn keypoint_mask(heat: &Heatmap) -> Vec<f32> {
    let hw = heat.height * heat.width;
    let mut mask = vec![0.0f32; hw];
    for i in 0..heat.k {
        let h = heat.channel(i);
        let peak = h.iter().copied().fold(0.0f32, f32::max);
        if peak <= 0.0 {
            continue;
        }
        for (m, &v) in mask.iter_mut().zip(h) {
            *m += v / peak;
        }
    }
    for m in &mut mask {
        *m = m.clamp(0.0, 1.0);
    }
    mask
}

/// Transport operation: suppress the source keypoint regions of `phi_src`
/// and paste the target keypoint regions of `phi_tgt`:
///
/// `psi = (1 - M_src)(1 - M_tgt) * phi_src + M_tgt * phi_tgt`
pub fn transport(
    phi_src: &FeatureMap,
    phi_tgt: &FeatureMap,
    heat_src: &Heatmap,
    heat_tgt: &Heatmap,
) -> Result<FeatureMap, KeypointError> {
    let same = phi_src.channels == phi_tgt.channels
        && phi_src.height == phi_tgt.height
        && phi_src.width == phi_tgt.width
        && heat_src.height == phi_src.height
        && heat_src.width == phi_src.width
        && heat_tgt.height == phi_src.height
        && heat_tgt.width == phi_src.width;
    if !same {
        return Err(KeypointError::ShapeMismatch {
            context: "transport",
            detail: format!(
                "phi_src {}x{}x{}, phi_tgt {}x{}x{}, heat_src {}x{}, heat_tgt {}x{}",
                phi_src.channels,
                phi_src.height,
                phi_src.width,
                phi_tgt.channels,
                phi_tgt.height,
                phi_tgt.width,
                heat_src.height,
                heat_src.width,
                heat_tgt.height,
                heat_tgt.width
            ),
        });
    }
    let mask_src = keypoint_mask(heat_src);
    let mask_tgt = keypoint_mask(heat_tgt);
    let hw = phi_src.height * phi_src.width;
    let mut out = FeatureMap::zeros(phi_src.channels, phi_src.height, phi_src.width);
    for c in 0..phi_src.channels {
        for p in 0..hw {
            let keep = (1.0 - mask_src[p]) * (1.0 - mask_tgt[p]);
            out.data[c * hw + p] =
                keep * phi_src.data[c * hw + p] + mask_tgt[p] * phi_tgt.data[c * hw + p];
        }
    }
    Ok(out)
}

/// Detector selection: the geometric backend needs no training and is the
/// default; the learned backend wraps trained transporter parameters.
pub enum DetectorBackend {
    Geometric {
        /// Downsampling of the feature grid relative to the image.
        stride: usize,
    },
    Learned(DetectorParams),
}

/// Default feature-grid stride of the geometric backend: coarse enough that
/// the depth statistics describe real workspace neighborhoods.
pub const GEOMETRIC_STRIDE: usize = 4;

impl DetectorBackend {
    /// Geometric backend at the default stride.
    pub fn geometric() -> Self {
        DetectorBackend::Geometric {
            stride: GEOMETRIC_STRIDE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DetectorBackend::Geometric { .. } => "geometric",
            DetectorBackend::Learned(_) => "learned",
        }
    }

    /// Keypoint feature dimension this backend produces.
    pub fn feat_dim(&self) -> usize {
        match self {
            DetectorBackend::Geometric { .. } => geometric::GEOMETRIC_CHANNELS,
            DetectorBackend::Learned(p) => p.feat_channels,
        }
    }

    pub fn detect(
        &self,
        image: &DepthImage,
        k: usize,
    ) -> Result<(FeatureMap, Heatmap), KeypointError> {
        match self {
            DetectorBackend::Geometric { stride } => detect_geometric(image, k, *stride),
            DetectorBackend::Learned(params) => params.detect(image),
        }
    }

    /// Full pipeline: detect, pool, and rescale locations to image pixels.
    pub fn keypoints(&self, image: &DepthImage, k: usize) -> Result<KeypointGraph, KeypointError> {
        let (phi, heat) = self.detect(image, k)?;
        let mut graph = extract_keypoints(&phi, &heat)?;
        let stride = image.width / heat.width;
        if stride > 1 {
            for loc in &mut graph.locations {
                loc.0 = loc.0 * stride + stride / 2;
                loc.1 = loc.1 * stride + stride / 2;
            }
        }
        graph.image_width = image.width;
        graph.image_height = image.height;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_heatmap_reads_the_feature_column() {
        let mut phi = FeatureMap::zeros(2, 3, 4);
        for c in 0..2 {
            for r in 0..3 {
                for col in 0..4 {
                    phi.set(c, r, col, (c * 100 + r * 10 + col) as f32);
                }
            }
        }
        let mut heat = Heatmap::zeros(1, 3, 4);
        heat.channel_mut(0)[2 * 4 + 1] = 1.0; // (row 2, col 1)
        let graph = extract_keypoints(&phi, &heat).unwrap();
        assert_eq!(graph.locations, vec![(2, 1)]);
        let hw = 12.0;
        assert_eq!(graph.feature(0), &[21.0 / hw, 121.0 / hw]);
    }

    #[test]
    fn constant_features_pool_to_the_constant() {
        let phi = FeatureMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![3.0; 4],
        };
        let mut heat = Heatmap::zeros(1, 2, 2);
        for v in heat.channel_mut(0) {
            *v = 0.25;
        }
        let graph = extract_keypoints(&phi, &heat).unwrap();
        assert!((graph.feature(0)[0] - 3.0 / 4.0).abs() < 1e-7);
    }

    #[test]
    fn argmax_tie_breaks_to_smallest_row_major_index() {
        let phi = FeatureMap::zeros(1, 2, 2);
        let mut heat = Heatmap::zeros(1, 2, 2);
        heat.channel_mut(0).copy_from_slice(&[0.25; 4]);
        let graph = extract_keypoints(&phi, &heat).unwrap();
        assert_eq!(graph.locations, vec![(0, 0)]);
    }

    #[test]
    fn transport_with_zero_masks_is_identity() {
        let phi_src = FeatureMap {
            channels: 2,
            height: 2,
            width: 2,
            data: (0..8).map(|v| v as f32).collect(),
        };
        let phi_tgt = FeatureMap {
            channels: 2,
            height: 2,
            width: 2,
            data: vec![9.0; 8],
        };
        let zero = Heatmap::zeros(1, 2, 2);
        let psi = transport(&phi_src, &phi_tgt, &zero, &zero).unwrap();
        assert_eq!(psi.data, phi_src.data);
    }

    #[test]
    fn transport_with_full_target_mask_returns_target() {
        let phi_src = FeatureMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let phi_tgt = FeatureMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![5.0, 6.0, 7.0, 8.0],
        };
        let zero = Heatmap::zeros(1, 2, 2);
        let mut full = Heatmap::zeros(1, 2, 2);
        full.channel_mut(0).copy_from_slice(&[1.0; 4]);
        let psi = transport(&phi_src, &phi_tgt, &zero, &full).unwrap();
        assert_eq!(psi.data, phi_tgt.data);
    }

    #[test]
    fn transport_one_hot_masks_swap_single_pixels() {
        let phi_src = FeatureMap {
            channels: 1,
            height: 1,
            width: 3,
            data: vec![1.0, 2.0, 3.0],
        };
        let phi_tgt = FeatureMap {
            channels: 1,
            height: 1,
            width: 3,
            data: vec![10.0, 20.0, 30.0],
        };
        let mut h_src = Heatmap::zeros(1, 1, 3);
        h_src.channel_mut(0)[0] = 1.0;
        let mut h_tgt = Heatmap::zeros(1, 1, 3);
        h_tgt.channel_mut(0)[2] = 1.0;
        let psi = transport(&phi_src, &phi_tgt, &h_src, &h_tgt).unwrap();
        // Source pixel zeroed, middle kept, target pixel pasted.
        assert_eq!(psi.data, vec![0.0, 2.0, 30.0]);
    }
}
