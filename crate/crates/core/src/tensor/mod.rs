//! Dense-tensor numeric core with reverse-mode automatic differentiation.
//!
//! Values live in a [`Graph`] tape: building an operation computes its result
//! eagerly and records enough to run [`Graph::backward`] over the step.
//! Everything is generic over [`Element`] (`f32` for training, `f64` for
//! gradient checking).

mod adam;
mod attention_ops;
mod conv;
mod element;
mod gradcheck;
mod graph;
mod linalg;
mod norm;
mod resample;
mod softmax;

pub use adam::{adam_step, AdamEntry, AdamHyper, OptimizerState};
pub use attention_ops::topk_softmax_slice;
pub use element::{gemm, Element};
pub use gradcheck::{grad_check, grad_check_seeded};
pub use graph::{Graph, TensorId};
pub use norm::BatchNormState;

use thiserror::Error;

/// Errors raised by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {message}")]
    Shape { op: &'static str, message: String },
    #[error("batchnorm2d: train mode needs more than one value per channel, got {count}")]
    DegenerateBatch { count: usize },
    #[error("topk_softmax: k must be >= 1")]
    TopKZero,
    #[error("nearest_upsample: factor must be >= 1")]
    BadUpsampleFactor,
    #[error("{op}: ratio {ratio} does not divide spatial size {size}")]
    RatioMismatch {
        op: &'static str,
        ratio: usize,
        size: usize,
    },
    #[error("sigmoid_bce_loss: target value {value} is not 0 or 1")]
    TargetNotBinary { value: f64 },
    #[error("sigmoid_bce_loss: target value {value} is outside [0, 1]")]
    TargetOutOfRange { value: f64 },
    #[error("adam_step: gradient for parameter '{name}' is not finite")]
    NonFiniteGradient { name: String },
    #[error("gradient check: output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn shape_error(op: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        message: message.into(),
    }
}

/// Unpack a rank-4 shape, naming the operation on failure.
pub(crate) fn dims4(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize), TensorError> {
    match shape {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        other => Err(shape_error(
            op,
            format!("expected a rank-4 tensor, got shape {other:?}"),
        )),
    }
}

/// Unpack a rank-5 shape, naming the operation on failure.
pub(crate) fn dims5(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    match shape {
        [a, b, c, d, e] => Ok((*a, *b, *c, *d, *e)),
        other => Err(shape_error(
            op,
            format!("expected a rank-5 tensor, got shape {other:?}"),
        )),
    }
}
