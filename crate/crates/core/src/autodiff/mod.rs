//! Reverse-mode automatic differentiation over dense `f64` tensors, the
//! optimizers used by both levels of the search, and a central-difference
//! gradient oracle.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{finite_difference_grad, max_relative_error, relative_error, DEFAULT_FD_STEP};
pub use optim::{OptimError, OptimizerConfig, OptimizerKind, OptimizerState, ParamRef};
pub use tape::{FusedInput, Gradients, Partial, Primitive, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: expected {expected} inputs, got {found}")]
    Arity {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: forward produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[cfg(test)]
mod tests;
