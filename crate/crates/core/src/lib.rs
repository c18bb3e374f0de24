//! Latent keypoint-graph dynamics for deformable-object manipulation.
//!
//! The crate is organized as a pipeline:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f32` tensors, plus
//!   the Adam optimizer and the checkpoint container.
//! - [`sim`]: a deterministic 2D position-based-dynamics simulator for rope
//!   and cloth with a top-down depth renderer, pick-and-place actions, and
//!   ground-truth reward oracles.
//! - [`keypoint`]: keypoint detection on depth images (a learned
//!   transporter-style detector and a deterministic geometric detector) and
//!   keypoint-graph construction.
//! - [`dynamics`]: the recurrent graph dynamics model — attention graph
//!   convolution with soft edges, moment-generating-function pooling, a
//!   gated recurrent belief, and reward heads.
//! - [`trainer`]: data collection, contrastive sequence training, and the
//!   top-1 prediction-accuracy metric.
//! - [`planner`]: keypoint-seeded cross-entropy-method planning and
//!   closed-loop policy evaluation.
//! - [`episode`]: the binary episode-log format shared by the collector,
//!   trainer, and CLI.
//!
//! Heavy inner loops (episode collection, batch gradients, CEM rollouts,
//! evaluation) fan out through [`exec`], which uses rayon when the default
//! `parallel` feature is enabled and plain sequential iteration otherwise.
//! Results are merged in index order, so outputs are identical in both modes.

pub mod autodiff;
pub mod episode;
pub mod exec;
pub mod dynamics;
pub mod keypoint;
pub mod planner;
pub mod sim;
pub mod trainer;
