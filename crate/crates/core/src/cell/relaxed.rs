//! Tape-recorded evaluation of the relaxed cell: each location is one fused
//! node computing the simplex-weighted sum of its clamped active ops.

use crate::autodiff::{FusedInput, Partial, Tape, Var};
use crate::Tensor;

use super::{CellDistribution, CellError, CellSample, Location, OpId};

/// Tape leaves for one forward pass: γ per location (shared by every site)
/// and simplex weights per site.
#[derive(Clone, Debug)]
pub struct CellLeaves {
    pub gamma: Vec<Var>,
}

impl CellLeaves {
    pub fn new(tape: &mut Tape, dist: &CellDistribution) -> Self {
        Self {
            gamma: Location::ALL
                .iter()
                .map(|&l| tape.param(Tensor::vector(dist.location(l).gamma().to_vec())))
                .collect(),
        }
    }

    /// Weight leaves for one site's sample, in location order.
    pub fn site_weights(tape: &mut Tape, sample: &CellSample) -> Vec<Var> {
        sample
            .draws
            .iter()
            .map(|d| tape.param(Tensor::vector(d.weights.clone())))
            .collect()
    }
}

struct Accumulated {
    value: Vec<f64>,
    dx: [Vec<f64>; 2],
    dw: Vec<Vec<f64>>,
    dgamma: Vec<(usize, Vec<f64>)>,
}

fn mix_location(
    tape: &Tape,
    dist: &CellDistribution,
    location: Location,
    gamma: Var,
    weights: Var,
    inputs: &[Var],
    clamp: f64,
) -> Result<Accumulated, CellError> {
    let state = dist.location(location);
    let w = tape.value(weights).data();
    if w.len() != state.len() {
        return Err(CellError::Arity {
            location,
            expected: state.len(),
            found: w.len(),
        });
    }
    let g = tape.value(gamma).data();
    let x1 = tape.value(inputs[0]).data();
    let x2 = inputs.get(1).map(|&v| tape.value(v).data());
    let n = x1.len();
    let mut acc = Accumulated {
        value: vec![0.0; n],
        dx: [vec![0.0; n], vec![0.0; if x2.is_some() { n } else { 0 }]],
        dw: Vec::with_capacity(state.len()),
        dgamma: Vec::new(),
    };
    for (k, &op) in state.ops().iter().enumerate() {
        let wk = w[k];
        let mut out = vec![0.0; n];
        let mut dg = op.takes_gamma().then(|| vec![0.0; n]);
        for i in 0..n {
            let (value, d1, d2, dgi) = match op {
                OpId::Unary(u) => {
                    let e = u.eval_clamped(x1[i], g[k], Some(clamp));
                    (e.value, e.dx, 0.0, e.dgamma)
                }
                OpId::Binary(b) => {
                    let x2 = x2.expect("binary location has two inputs");
                    let e = b.eval_clamped(x1[i], x2[i], g[k], Some(clamp));
                    (e.value, e.dx1, e.dx2, e.dgamma)
                }
            };
            out[i] = value;
            acc.value[i] += wk * value;
            acc.dx[0][i] += wk * d1;
            if x2.is_some() {
                acc.dx[1][i] += wk * d2;
            }
            if let Some(dg) = dg.as_mut() {
                dg[i] = wk * dgi;
            }
        }
        acc.dw.push(out);
        if let Some(dg) = dg {
            acc.dgamma.push((k, dg));
        }
    }
    Ok(acc)
}

fn record(
    tape: &mut Tape,
    location: Location,
    gamma: Var,
    weights: Var,
    inputs: &[Var],
    acc: Accumulated,
) -> Result<Var, CellError> {
    let shape = tape.value(inputs[0]).shape().to_vec();
    let mut fused = Vec::with_capacity(inputs.len() + acc.dw.len() + acc.dgamma.len());
    for (&var, dx) in inputs.iter().zip(acc.dx) {
        fused.push(FusedInput {
            var,
            partial: Partial::Full(dx),
        });
    }
    for (index, partial) in acc.dw.into_iter().enumerate() {
        fused.push(FusedInput {
            var: weights,
            partial: Partial::Element { index, partial },
        });
    }
    for (index, partial) in acc.dgamma {
        fused.push(FusedInput {
            var: gamma,
            partial: Partial::Element { index, partial },
        });
    }
    Ok(tape.fused(location.name(), shape, acc.value, fused)?)
}

/// Evaluates the relaxed cell elementwise on `x` for one site.
pub fn eval_relaxed(
    tape: &mut Tape,
    dist: &CellDistribution,
    leaves: &CellLeaves,
    weights: &[Var],
    x: Var,
    clamp: f64,
) -> Result<Var, CellError> {
    if weights.len() != Location::ALL.len() {
        return Err(CellError::Arity {
            location: Location::U1,
            expected: Location::ALL.len(),
            found: weights.len(),
        });
    }
    let apply = |tape: &mut Tape, location: Location, inputs: &[Var]| {
        let i = location.index();
        let acc = mix_location(tape, dist, location, leaves.gamma[i], weights[i], inputs, clamp)?;
        record(tape, location, leaves.gamma[i], weights[i], inputs, acc)
    };
    let u1 = apply(tape, Location::U1, &[x])?;
    let u2 = apply(tape, Location::U2, &[x])?;
    let u4 = apply(tape, Location::U4, &[x])?;
    let bottom = apply(tape, Location::BBot, &[u1, u2])?;
    let u3 = apply(tape, Location::U3, &[bottom])?;
    apply(tape, Location::BTop, &[u3, u4])
}
