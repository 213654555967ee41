//! Dense-tensor numeric core with reverse-mode differentiation.
//!
//! Everything the encoder, decoder, and trainer compute flows through the
//! [`Graph`] tape: forward calls record enough state to replay the chain rule
//! in reverse, and [`Graph::backward`] accumulates gradients for every
//! tracked leaf. Values are 64-bit floats throughout, which keeps the
//! finite-difference harness in [`gradcheck`] meaningful for the exact same
//! code paths used in training.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gradcheck::{check_scalar_fn, run_op_suite, CheckOutcome};
pub use params::{ParamBinding, ParamStore};
pub use tape::{Gradients, Graph, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape { op: &'static str, expected: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("softmax over an empty row")]
    EmptySoftmax,
    #[error("dropout rate must lie in [0, 1); got {0}")]
    InvalidRate(f64),
    #[error("backward requires a scalar loss; got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}
