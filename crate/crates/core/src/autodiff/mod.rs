//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Sized for the small networks this crate trains: layers of width <= 256
//! and images up to 96x96. Evaluation is deterministic — identical inputs
//! produce bit-identical outputs — and a tensor reused several times sums
//! its incoming gradients (the multivariate chain rule). There is no
//! broadcasting beyond scalar-tensor ops; shape changes are explicit.

pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use params::{ParamError, ParamStore};
pub use tape::{Gradients, Tape, TapeError, Var};
pub use tensor::Tensor;
