//! Learned transporter-style detector.
//!
//! A small conv encoder produces the feature map, a parallel conv head
//! produces spatial-softmax heatmaps, and a mirrored decoder reconstructs the
//! target frame from transported features. Training minimizes the mean L1
//! reconstruction error over frame pairs sampled within an episode; the
//! source branch is detached, so gradients flow only through the target
//! branch of the transport, which is what forces the heatmaps to find the
//! pixels that move.
//!
//! Downsampling is explicit: each stage is a stride-1 "same" convolution
//! followed by 2x2 average pooling, three stages for an 8x total stride.
//!
//! The encoder input carries two coordinate channels next to the depth.
//! Keypoint features are heatmap-pooled feature-map cells, so without an
//! absolute-position signal they describe only local appearance; a tiny
//! stack cannot recover position from border effects the way a deep
//! full-scale network does, and downstream dynamics cannot predict where a
//! pick-and-place leaves the object. The keypoint head sees depth only, so
//! detections still track the object rather than fixed positions.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureMap, Heatmap, KeypointError};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::episode::Rollout;
use crate::sim::DepthImage;

pub const STRIDE: usize = 8;
const FEAT_CHANNELS: usize = 16;
const KERNEL: usize = 3;
/// Encoder input: depth plus centered x and y coordinate maps.
const ENC_IN: usize = 3;

/// Extra gain on the keypoint head's output conv at init. Near-uniform
/// initial heatmaps saturate the clamped transport mask at 1, which zeroes
/// every heatmap gradient; starting with peaked logits keeps the mask local
/// and the transport mechanism trainable.
const KP_LOGIT_GAIN: f32 = 8.0;

/// Trained detector parameters, stored under the `detector/` namespace.
pub struct DetectorParams {
    pub store: ParamStore,
    pub k: usize,
    pub feat_channels: usize,
}

pub struct TrainDetectorReport {
    /// Mean reconstruction loss per epoch.
    pub epoch_loss: Vec<f32>,
}

struct ConvVars {
    w: Var,
    b: Var,
}

struct DetectorVars {
    enc: Vec<ConvVars>,
    kp: Vec<ConvVars>,
    dec: Vec<ConvVars>,
}

fn conv_init(store: &mut ParamStore, path: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    // He-style fan-in scaling; glorot shrinks sparse depth input to nothing
    // over the seven-conv path.
    let fan_in = cin * KERNEL * KERNEL;
    let limit = (6.0 / fan_in as f32).sqrt();
    store
        .insert(
            &format!("{path}/w"),
            Tensor::uniform(vec![cout, cin, KERNEL, KERNEL], limit, rng),
        )
        .expect("fresh path");
    // Small positive bias keeps the relus alive on sparse depth input.
    store
        .insert(&format!("{path}/b"), Tensor::filled(vec![cout], 0.01))
        .expect("fresh path");
}

impl DetectorParams {
    /// Fresh, randomly initialized detector for `k` keypoints.
    pub fn init(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = FEAT_CHANNELS;
        conv_init(&mut store, "detector/enc/conv0", ENC_IN, c, &mut rng);
        conv_init(&mut store, "detector/enc/conv1", c, c, &mut rng);
        conv_init(&mut store, "detector/enc/conv2", c, c, &mut rng);
        conv_init(&mut store, "detector/kp/conv0", 1, c, &mut rng);
        conv_init(&mut store, "detector/kp/conv1", c, c, &mut rng);
        conv_init(&mut store, "detector/kp/conv2", c, k, &mut rng);
        let boosted = store
            .get("detector/kp/conv2/w")
            .expect("just inserted")
            .map(|v| v * KP_LOGIT_GAIN);
        store
            .set("detector/kp/conv2/w", boosted)
            .expect("path exists");
        conv_init(&mut store, "detector/dec/conv0", c, c, &mut rng);
        conv_init(&mut store, "detector/dec/conv1", c, c, &mut rng);
        conv_init(&mut store, "detector/dec/conv2", c, c, &mut rng);
        conv_init(&mut store, "detector/dec/conv3", c, 1, &mut rng);
        Self {
            store,
            k,
            feat_channels: c,
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> DetectorVars {
        let conv = |tape: &mut Tape, store: &ParamStore, path: &str| ConvVars {
            w: store
                .bind(tape, &format!("{path}/w"), trainable)
                .expect("unique binding per tape"),
            b: store
                .bind(tape, &format!("{path}/b"), trainable)
                .expect("unique binding per tape"),
        };
        DetectorVars {
            enc: (0..3)
                .map(|i| conv(tape, &self.store, &format!("detector/enc/conv{i}")))
                .collect(),
            kp: (0..3)
                .map(|i| conv(tape, &self.store, &format!("detector/kp/conv{i}")))
                .collect(),
            dec: (0..4)
                .map(|i| conv(tape, &self.store, &format!("detector/dec/conv{i}")))
                .collect(),
        }
    }

    /// Forward pass without gradients.
    pub fn detect(&self, image: &DepthImage) -> Result<(FeatureMap, Heatmap), KeypointError> {
        // The downsampled grid must still fit the 3x3 convs of the decoder.
        if image.width % STRIDE != 0
            || image.height % STRIDE != 0
            || image.width / STRIDE < KERNEL
            || image.height / STRIDE < KERNEL
        {
            return Err(KeypointError::BadImageSize {
                width: image.width,
                height: image.height,
                stride: STRIDE,
            });
        }
        if image.nonzero_count() == 0 {
            return Err(KeypointError::EmptyObservation);
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc_in = tape.constant(encoder_input(image));
        let depth = tape.constant(image_tensor(image));
        let phi = encoder_forward(&mut tape, &vars, enc_in)?;
        let heat = heatmap_forward(&mut tape, &vars, depth, self.k)?;
        let (gh, gw) = (image.height / STRIDE, image.width / STRIDE);
        let phi_t = tape.value(phi);
        let heat_t = tape.value(heat);
        Ok((
            FeatureMap {
                channels: self.feat_channels,
                height: gh,
                width: gw,
                data: phi_t.data().to_vec(),
            },
            Heatmap {
                k: self.k,
                height: gh,
                width: gw,
                data: heat_t.data().to_vec(),
            },
        ))
    }
}

fn image_tensor(image: &DepthImage) -> Tensor {
    Tensor::new(vec![1, image.height, image.width], image.pixels.clone())
}

/// Depth plus centered coordinate channels, `[3, H, W]`.
fn encoder_input(image: &DepthImage) -> Tensor {
    let (h, w) = (image.height, image.width);
    let mut data = Vec::with_capacity(3 * h * w);
    data.extend_from_slice(&image.pixels);
    for _r in 0..h {
        for c in 0..w {
            data.push((c as f32 + 0.5) / w as f32 - 0.5);
        }
    }
    for r in 0..h {
        for _c in 0..w {
            data.push((r as f32 + 0.5) / h as f32 - 0.5);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn conv_block(tape: &mut Tape, vars: &ConvVars, x: Var, relu: bool) -> Result<Var, KeypointError> {
    let y = tape.conv2d(x, vars.w, Some(vars.b))?;
    Ok(if relu { tape.relu(y) } else { y })
}

fn encoder_forward(tape: &mut Tape, vars: &DetectorVars, img: Var) -> Result<Var, KeypointError> {
    let mut x = img;
    for conv in &vars.enc {
        x = conv_block(tape, conv, x, true)?;
        x = tape.avg_pool2(x)?;
    }
    Ok(x)
}

/// Keypoint head: conv stack to `k` channels, then a per-channel spatial
/// softmax so every channel is a normalized attention map.
fn heatmap_forward(
    tape: &mut Tape,
    vars: &DetectorVars,
    img: Var,
    k: usize,
) -> Result<Var, KeypointError> {
    let mut x = img;
    for (i, conv) in vars.kp.iter().enumerate() {
        x = conv_block(tape, conv, x, i + 1 < vars.kp.len())?;
        x = tape.avg_pool2(x)?;
    }
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let flat = tape.reshape(x, vec![k, h * w])?;
    let soft = tape.softmax(flat)?;
    Ok(tape.reshape(soft, vec![k, h, w])?)
}

fn decoder_forward(tape: &mut Tape, vars: &DetectorVars, psi: Var) -> Result<Var, KeypointError> {
    let mut x = psi;
    for conv in &vars.dec[..3] {
        x = conv_block(tape, conv, x, true)?;
        x = tape.upsample2(x)?;
    }
    // Final projection stays linear; a relu here starts saturated at zero on
    // mostly-background depth images and never recovers.
    conv_block(tape, &vars.dec[3], x, false)
}

/// Width (in grid cells) of the Gaussian transport masks used in training.
const MASK_SIGMA: f32 = 1.0;

/// Soft-argmax keypoint coordinates in grid cells: `[K, 1]` columns for x
/// and y. Differentiable, unlike the hard argmax.
fn soft_argmax(tape: &mut Tape, heat: Var) -> Result<(Var, Var), KeypointError> {
    let shape = tape.value(heat).shape().to_vec();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(heat, vec![k, h * w])?;
    let xs: Vec<f32> = (0..h * w).map(|p| (p % w) as f32).collect();
    let ys: Vec<f32> = (0..h * w).map(|p| (p / w) as f32).collect();
    let x_col = tape.constant(Tensor::new(vec![h * w, 1], xs));
    let y_col = tape.constant(Tensor::new(vec![h * w, 1], ys));
    Ok((tape.matmul(flat, x_col)?, tape.matmul(flat, y_col)?))
}

/// Transport mask for training: fixed-width Gaussians centered at the
/// soft-argmax keypoints, summed and clamped to `[0, 1]`.
///
/// The peak-rescaled heatmap-sum mask admits a degenerate optimum — the
/// head flattens its heatmaps until the clamped mask saturates at one
/// everywhere, gradients vanish, and training reduces to plain
/// autoencoding. A fixed mask width cannot be widened by the optimizer, so
/// the suppress/paste pressure that localizes keypoints stays active.
fn tape_keypoint_mask(tape: &mut Tape, heat: Var, k: usize) -> Result<Var, KeypointError> {
    let shape = tape.value(heat).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let (mu_x, mu_y) = soft_argmax(tape, heat)?;
    let xs: Vec<f32> = (0..h * w).map(|p| (p % w) as f32).collect();
    let ys: Vec<f32> = (0..h * w).map(|p| (p / w) as f32).collect();
    let x_map = tape.constant(Tensor::new(vec![1, h * w], xs));
    let y_map = tape.constant(Tensor::new(vec![1, h * w], ys));
    let ones = tape.constant(Tensor::filled(vec![1, h * w], 1.0));
    let mut acc: Option<Var> = None;
    for i in 0..k {
        let mut d2: Option<Var> = None;
        for (mu, map) in [(mu_x, x_map), (mu_y, y_map)] {
            let mu_i = tape.slice(mu, 0, i, 1)?;
            let tiled = tape.matmul(mu_i, ones)?;
            let diff = tape.sub(map, tiled)?;
            let sq = tape.mul(diff, diff)?;
            d2 = Some(match d2 {
                Some(a) => tape.add(a, sq)?,
                None => sq,
            });
        }
        let scaled = tape.scale(d2.expect("two axes"), -0.5 / (MASK_SIGMA * MASK_SIGMA));
        let gauss = tape.exp(scaled);
        acc = Some(match acc {
            Some(a) => tape.add(a, gauss)?,
            None => gauss,
        });
    }
    let sum = acc.expect("k >= 1");
    let clamped = tape.clamp(sum, 0.0, 1.0);
    Ok(tape.reshape(clamped, vec![h, w])?)
}

/// Transport on the tape; the source feature map and mask enter as
/// constants, so gradients reach only the target branch.
fn tape_transport(
    tape: &mut Tape,
    phi_src: Var,
    phi_tgt: Var,
    mask_src: Var,
    mask_tgt: Var,
) -> Result<Var, KeypointError> {
    let neg_src = tape.scale(mask_src, -1.0);
    let one_minus_src = tape.add_scalar(neg_src, 1.0);
    let neg_tgt = tape.scale(mask_tgt, -1.0);
    let one_minus_tgt = tape.add_scalar(neg_tgt, 1.0);
    let keep = tape.mul(one_minus_src, one_minus_tgt)?;
    let kept_src = tape.mul_channel(phi_src, keep)?;
    let pasted_tgt = tape.mul_channel(phi_tgt, mask_tgt)?;
    Ok(tape.add(kept_src, pasted_tgt)?)
}

/// Train the detector on episode logs by transported reconstruction.
///
/// Samples `frames / 2` source/target pairs per episode per epoch, one Adam
/// step per pair. Returns the updated parameters and the per-epoch mean loss.
pub fn train_detector(
    dataset: &[Rollout],
    mut params: DetectorParams,
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<(DetectorParams, TrainDetectorReport), KeypointError> {
    let episodes: Vec<&Rollout> = dataset.iter().filter(|r| r.frames.len() >= 2).collect();
    if episodes.is_empty() {
        return Err(KeypointError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainDetectorReport {
        epoch_loss: Vec::with_capacity(epochs),
    };
    for _epoch in 0..epochs {
        let mut losses = Vec::new();
        for episode in &episodes {
            let pairs = (episode.frames.len() / 2).max(1);
            for _ in 0..pairs {
                let src = episode.frames.choose(&mut rng).expect("nonempty");
                let tgt = episode.frames.choose(&mut rng).expect("nonempty");
                let loss = train_pair(&mut params, &src.image, &tgt.image, lr)?;
                losses.push(loss);
            }
        }
        let mean = losses.iter().sum::<f32>() / losses.len() as f32;
        report.epoch_loss.push(mean);
    }
    Ok((params, report))
}

fn train_pair(
    params: &mut DetectorParams,
    src: &DepthImage,
    tgt: &DepthImage,
    lr: f32,
) -> Result<f32, KeypointError> {
    // Detached source branch on a scratch tape.
    let (phi_src, heat_src) = {
        let mut scratch = Tape::new();
        let vars = params.bind(&mut scratch, false);
        let enc_src = scratch.constant(encoder_input(src));
        let depth_src = scratch.constant(image_tensor(src));
        let phi = encoder_forward(&mut scratch, &vars, enc_src)?;
        let heat = heatmap_forward(&mut scratch, &vars, depth_src, params.k)?;
        let mask = tape_keypoint_mask(&mut scratch, heat, params.k)?;
        (
            scratch.value(phi).clone(),
            scratch.value(mask).clone(),
        )
    };

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let enc_tgt = tape.constant(encoder_input(tgt));
    let depth_tgt = tape.constant(image_tensor(tgt));
    let phi_tgt = encoder_forward(&mut tape, &vars, enc_tgt)?;
    let heat_tgt = heatmap_forward(&mut tape, &vars, depth_tgt, params.k)?;
    let mask_tgt = tape_keypoint_mask(&mut tape, heat_tgt, params.k)?;
    let phi_src_c = tape.constant(phi_src);
    let mask_src_c = tape.constant(heat_src);
    let psi = tape_transport(&mut tape, phi_src_c, phi_tgt, mask_src_c, mask_tgt)?;
    let recon = decoder_forward(&mut tape, &vars, psi)?;
    let target = tape.constant(image_tensor(tgt));
    let diff = tape.sub(recon, target)?;
    let l1 = tape.abs(diff);
    let loss = tape.mean(l1);

    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    params
        .store
        .adam_step(grads.by_path(), lr, (0.9, 0.999), 1e-8)
        .map_err(|e| KeypointError::ShapeMismatch {
            context: "train_detector",
            detail: e.to_string(),
        })?;
    Ok(value)
}
