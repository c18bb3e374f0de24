use std::collections::BTreeMap;

use thiserror::Error;

use super::tape::{Tape, TapeError, Var};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter path {0:?} already exists")]
    DuplicatePath(String),
    #[error("unknown parameter path {0:?}")]
    UnknownPath(String),
    #[error("gradient shape {got:?} does not match parameter {path:?} of shape {want:?}")]
    ShapeMismatch {
        path: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGrad(String),
}

/// Named parameter map plus per-parameter Adam moments.
///
/// Iteration order is the lexicographic path order everywhere, which keeps
/// updates and serialization deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Tensor>,
    moment2: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, value: Tensor) -> Result<(), ParamError> {
        if self.params.contains_key(path) {
            return Err(ParamError::DuplicatePath(path.to_string()));
        }
        self.moment1.insert(path.to_string(), Tensor::zeros(value.shape().to_vec()));
        self.moment2.insert(path.to_string(), Tensor::zeros(value.shape().to_vec()));
        self.params.insert(path.to_string(), value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn set(&mut self, path: &str, value: Tensor) -> Result<(), ParamError> {
        match self.params.get_mut(path) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(ParamError::UnknownPath(path.to_string())),
        }
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Put a stored parameter on a tape: as a differentiable parameter leaf
    /// when `trainable`, otherwise as a constant. Cheap — tensor data is
    /// shared, not copied.
    pub fn bind(&self, tape: &mut Tape, path: &str, trainable: bool) -> Result<Var, TapeError> {
        let value = self
            .params
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path:?} not in store"))
            .clone();
        if trainable {
            tape.param(path, value)
        } else {
            Ok(tape.constant(value))
        }
    }

    /// One Adam update over the paths present in `grads`.
    ///
    /// Rejects non-finite gradients before touching any state, so a failed
    /// call leaves the store unchanged. The shared step counter increments
    /// once per call.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
        betas: (f32, f32),
        eps: f32,
    ) -> Result<(), ParamError> {
        for (path, grad) in grads {
            let param = self
                .params
                .get(path)
                .ok_or_else(|| ParamError::UnknownPath(path.clone()))?;
            if grad.shape() != param.shape() {
                return Err(ParamError::ShapeMismatch {
                    path: path.clone(),
                    want: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(ParamError::NonFiniteGrad(path.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f32;
        let (b1, b2) = betas;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for (path, grad) in grads {
            let m = self.moment1.get_mut(path).expect("moment1 tracks params");
            let v = self.moment2.get_mut(path).expect("moment2 tracks params");
            let p = self.params.get_mut(path).expect("validated above");
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let g = grad.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * g;
                vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
