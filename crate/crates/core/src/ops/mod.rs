//! Primitive cell operations, the output clamp, baseline activations and the
//! closed-form discovered activations.

mod baseline;
mod discovered;
pub mod scalar;
mod table;


use thiserror::Error;

use crate::autodiff::{AutodiffError, FusedInput, Partial, Tape, Var};

pub use baseline::{eval_baseline, Baseline};
pub use discovered::{eval_discovered, Dual, Family, FormulaId};
pub use table::{BinaryEval, BinaryOpId, UnaryEval, UnaryOpId};

/// Default output clamp ℓ.
pub const DEFAULT_CLAMP: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpError {
    #[error("op {0} requires a gamma parameter")]
    MissingGamma(&'static str),
    #[error("op {0} does not take a gamma parameter")]
    UnexpectedGamma(&'static str),
    #[error("clamp limit must be positive and finite, got {0}")]
    InvalidClamp(f64),
    #[error("unknown baseline activation {0:?}")]
    UnknownBaseline(String),
    #[error("unknown discovered activation {0:?}")]
    UnknownFormula(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Element `index` of a tape variable holding γ values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GammaRef {
    pub var: Var,
    pub index: usize,
}

fn check_gamma(name: &'static str, takes: bool, gamma: Option<GammaRef>) -> Result<(), OpError> {
    match (takes, gamma) {
        (true, None) => Err(OpError::MissingGamma(name)),
        (false, Some(_)) => Err(OpError::UnexpectedGamma(name)),
        _ => Ok(()),
    }
}

fn check_clamp(limit: f64) -> Result<(), OpError> {
    if limit > 0.0 && limit.is_finite() {
        Ok(())
    } else {
        Err(OpError::InvalidClamp(limit))
    }
}

fn gamma_value(tape: &Tape, gamma: Option<GammaRef>) -> f64 {
    gamma.map_or(0.0, |g| tape.value(g.var).data()[g.index])
}

/// Applies a unary op elementwise, then the ℓ-clamp.
pub fn eval_unary(tape: &mut Tape, id: UnaryOpId, x: Var, gamma: Option<GammaRef>, clamp: f64) -> Result<Var, OpError> {
    check_gamma(id.key(), id.takes_gamma(), gamma)?;
    check_clamp(clamp)?;
    let g = gamma_value(tape, gamma);
    let input = tape.value(x);
    let shape = input.shape().to_vec();
    let n = input.len();
    let (mut value, mut dx, mut dg) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &xi in input.data() {
        let e = id.eval_clamped(xi, g, Some(clamp));
        value.push(e.value);
        dx.push(e.dx);
        dg.push(e.dgamma);
    }
    let mut inputs = vec![FusedInput {
        var: x,
        partial: Partial::Full(dx),
    }];
    if let Some(gr) = gamma {
        inputs.push(FusedInput {
            var: gr.var,
            partial: Partial::Element {
                index: gr.index,
                partial: dg,
            },
        });
    }
    Ok(tape.fused(id.key(), shape, value, inputs)?)
}

/// Applies a binary op elementwise to equal-shaped inputs, then the ℓ-clamp.
pub fn eval_binary(
    tape: &mut Tape,
    id: BinaryOpId,
    x1: Var,
    x2: Var,
    gamma: Option<GammaRef>,
    clamp: f64,
) -> Result<Var, OpError> {
    check_gamma(id.key(), id.takes_gamma(), gamma)?;
    check_clamp(clamp)?;
    let (a, b) = (tape.value(x1), tape.value(x2));
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: id.key(),
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        }
        .into());
    }
    let g = gamma_value(tape, gamma);
    let shape = a.shape().to_vec();
    let n = a.len();
    let mut value = Vec::with_capacity(n);
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    let mut dg = Vec::with_capacity(n);
    for (&u, &v) in a.data().iter().zip(b.data()) {
        let e = id.eval_clamped(u, v, g, Some(clamp));
        value.push(e.value);
        d1.push(e.dx1);
        d2.push(e.dx2);
        dg.push(e.dgamma);
    }
    let mut inputs = vec![
        FusedInput {
            var: x1,
            partial: Partial::Full(d1),
        },
        FusedInput {
            var: x2,
            partial: Partial::Full(d2),
        },
    ];
    if let Some(gr) = gamma {
        inputs.push(FusedInput {
            var: gr.var,
            partial: Partial::Element {
                index: gr.index,
                partial: dg,
            },
        });
    }
    Ok(tape.fused(id.key(), shape, value, inputs)?)
}

/// Scalar clamp: `(clamped value, derivative)`.
pub fn clamp(y: f64, limit: f64) -> (f64, f64) {
    if y.abs() > limit {
        (limit.copysign(y), 0.0)
    } else {
        (y, 1.0)
    }
}

/// Replaces `|y| > ℓ` with `ℓ·sign(y)`; gradient is 1 inside the band, 0
/// outside.
pub fn clamp_output(tape: &mut Tape, y: Var, limit: f64) -> Result<Var, OpError> {
    check_clamp(limit)?;
    Ok(tape.map(y, |v| clamp(v, limit))?)
}
