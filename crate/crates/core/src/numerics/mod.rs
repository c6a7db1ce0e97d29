//! Dense `f64` tensors, a reverse-mode tape and the AdamW optimizer.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Segment;
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{Binder, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range {bound} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on non-scalar of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}

/// Naive triple-loop product, kept as a reference for the blocked kernel.
#[cfg(test)]
pub(crate) fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

#[cfg(test)]
mod tests;
