//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitive ops as they run. [`Tape::backward`] walks it
//! in reverse to accumulate adjoints and [`Tape::replay`] re-executes it from
//! the leaves. On top sit the two sequence encoders (LSTM and a pre-norm
//! Transformer), the softmax allocation head, the training losses and Adam.

mod adam;
pub mod gradcheck;
mod loss;
mod nn;
mod params;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{
    cross_entropy, cross_entropy_loss, entropy, mse, neg_ratio, neg_ratio_loss, RATIO_EPS,
};
pub use nn::{
    allocation_head, allocation_weights, bind_params, encode, lstm_encode, score_head,
    transformer_attention, transformer_encode, BoundParams,
};
pub use params::{glorot_limit, init_params, Architecture, ModelHyper, ModelParams};
pub use rng::RngStream;
pub use tape::{compute, Gradients, Op, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("non-finite value produced by {op}")]
    NumericalFault { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("model is {actual}, expected {expected}")]
    ArchitectureMismatch {
        expected: Architecture,
        actual: Architecture,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[cfg(test)]
mod tests;
