//! Residual blocks of the decoder: the Mamba2 block and the attention block.

mod attention;
mod mamba2;

pub use attention::{AttentionBlock, AttentionConfig, KvCache};
pub use mamba2::{Mamba2Block, MambaState, SsdConfig};

use crate::numerics::{NumericsError, Result as TensorResult, Rng, Tensor};
use crate::ssd::SsdError;
use thiserror::Error;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("decode state does not fit this block: {0}")]
    StateShapeMismatch(String),
    #[error(
        "kv cache has {got} heads of width {width}, block expects {heads} of width {head_dim}"
    )]
    CacheLengthMismatch {
        heads: usize,
        head_dim: usize,
        got: usize,
        width: usize,
    },
    #[error("invalid block configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ssd(#[from] SsdError),
}

pub type Result<T, E = BlockError> = std::result::Result<T, E>;

/// `x / sqrt(mean(x²) + eps) ⊙ gain` over the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> TensorResult<Tensor> {
    x.rms_norm(gain, eps)
}

/// Standard deviations used to initialize projection weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScale {
    pub std: f64,
    /// For projections that write into the residual stream.
    pub out_std: f64,
}

impl InitScale {
    pub fn for_depth(n_layers: usize) -> Self {
        InitScale {
            std: 0.02,
            out_std: 0.02 / (2.0 * n_layers.max(1) as f64).sqrt(),
        }
    }
}

pub(crate) fn normal_param(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape.to_vec(), rng.normal_vec(n, std)).expect("finite init")
}

pub(crate) fn const_param(shape: &[usize], value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape.to_vec(), vec![value; n]).expect("finite init")
}
