//! Dense tensors and tape-based reverse-mode differentiation.

pub mod kernels;
mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Layer normalisation over the last dimension with identity affine terms.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if cols < 2 {
        return Err(Error::InvalidShape(format!(
            "layer norm needs a last dimension of at least 2, got {cols}"
        )));
    }
    let (xhat, _) = kernels::normalize_rows(x.data(), cols);
    Tensor::new(x.shape().to_vec(), xhat)
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::silu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `−log softmax(logits)[target]` for a single row of logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidShape(format!(
            "cross entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            size: logits.len(),
        });
    }
    Ok(-kernels::log_softmax(logits)[target])
}

/// Mean absolute difference over all elements.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}
