//! Dense `f64` tensors with taped reverse-mode differentiation, a seeded
//! generator, and operation counters. Every other module computes through
//! this substrate.

pub mod counters;
mod gemm;
pub mod gradcheck;
mod kernels;
mod ops;
mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::Tensor;

pub(crate) use gemm::{gemm, MatRef};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape ({detail})")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for {ndim} dimensions")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },
    #[error("{op}: index out of range ({detail})")]
    IndexOutOfRange { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
