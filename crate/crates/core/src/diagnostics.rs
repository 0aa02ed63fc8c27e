//! Finite-difference audit of every analytic derivative in the library:
//! each primitive op, the clamp, a full relaxed cell and a model loss.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{finite_difference_grad, relative_error, Tape, DEFAULT_FD_STEP};
use crate::cell::{eval_relaxed, sample_cell, CellDistribution, CellError, CellLeaves, Location};
use crate::data::{gen_spirals, DataError};
use crate::model::{build_model, Family, ModelError, ModelSpec, RelaxedSites};
use crate::ops::{clamp, BinaryOpId, UnaryOpId, DEFAULT_CLAMP};
use crate::rng::stream;
use crate::Tensor;

/// Largest relative error a check may show and still pass.
pub const TOLERANCE: f64 = 1e-5;

/// Evaluation points per op check.
pub const POINTS: usize = 50;

/// Points closer than this to a kink are skipped.
const KINK_MARGIN: f64 = 0.05;

/// Factor applied to a sabotaged derivative.
const SABOTAGE: f64 = 1.01;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("no check named {0:?}")]
    UnknownCheck(String),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    /// `unary/<op>`, `binary/<op>`, `clamp`, `cell` or `model`.
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Names of every check in [`gradient_suite`], in run order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = UnaryOpId::ALL.iter().map(|op| format!("unary/{}", op.key())).collect();
    names.extend(BinaryOpId::ALL.iter().map(|op| format!("binary/{}", op.key())));
    names.extend(["clamp", "cell", "model"].map(String::from));
    names
}

/// Runs every check. `sabotage` names a check (or a bare op key) whose
/// analytic derivative is scaled by a small factor, so it must fail.
pub fn gradient_suite(seed: u64, sabotage: Option<&str>) -> Result<Vec<CheckResult>, DiagnosticsError> {
    let names = check_names();
    let target = match sabotage {
        None => None,
        Some(s) => Some(
            names
                .iter()
                .find(|n| n.as_str() == s || n.rsplit('/').next() == Some(s))
                .ok_or_else(|| DiagnosticsError::UnknownCheck(s.to_string()))?
                .clone(),
        ),
    };
    let factor = |name: &str| if target.as_deref() == Some(name) { SABOTAGE } else { 1.0 };
    let mut rng = stream(seed, &[0x4743]);
    let mut out = Vec::with_capacity(names.len());
    for op in UnaryOpId::ALL {
        let name = format!("unary/{}", op.key());
        let k = factor(&name);
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < POINTS {
            let x: f64 = rng.random_range(-6.0..6.0);
            let g: f64 = rng.random_range(-2.0..2.0);
            if x.abs() < KINK_MARGIN {
                continue;
            }
            let e = op.eval(x, g);
            worst = worst
                .max(relative_error(k * e.dx, fd(|t| op.eval(t, g).value, x)))
                .max(relative_error(k * e.dgamma, fd(|t| op.eval(x, t).value, g)));
            n += 1;
        }
        out.push(CheckResult {
            name,
            points: n,
            max_rel_err: worst,
        });
    }
    for op in BinaryOpId::ALL {
        let name = format!("binary/{}", op.key());
        let k = factor(&name);
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < POINTS {
            let a: f64 = rng.random_range(-4.0..4.0);
            let b: f64 = rng.random_range(-4.0..4.0);
            let g: f64 = rng.random_range(-2.0..2.0);
            if (a - b).abs() < KINK_MARGIN {
                continue;
            }
            let e = op.eval(a, b, g);
            worst = worst
                .max(relative_error(k * e.dx1, fd(|t| op.eval(t, b, g).value, a)))
                .max(relative_error(k * e.dx2, fd(|t| op.eval(a, t, g).value, b)))
                .max(relative_error(k * e.dgamma, fd(|t| op.eval(a, b, t).value, g)));
            n += 1;
        }
        out.push(CheckResult {
            name,
            points: n,
            max_rel_err: worst,
        });
    }
    out.push(check_clamp(&mut rng, factor("clamp")));
    out.push(check_cell(&mut rng, factor("cell"))?);
    out.push(check_model(seed, factor("model"))?);
    Ok(out)
}

fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    finite_difference_grad(|p| f(p[0]), &[x], DEFAULT_FD_STEP)[0]
}

fn check_clamp<R: Rng>(rng: &mut R, k: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < POINTS {
        let y: f64 = rng.random_range(-2.0 * DEFAULT_CLAMP..2.0 * DEFAULT_CLAMP);
        if (y.abs() - DEFAULT_CLAMP).abs() < KINK_MARGIN {
            continue;
        }
        let (_, d) = clamp(y, DEFAULT_CLAMP);
        worst = worst.max(relative_error(k * d, fd(|t| clamp(t, DEFAULT_CLAMP).0, y)));
        n += 1;
    }
    CheckResult {
        name: "clamp".into(),
        points: n,
        max_rel_err: worst,
    }
}

/// `Σ cᵢ·cell(xᵢ)` against its input, mixing weights and γ under one fixed
/// sample of the full space.
fn check_cell<R: Rng>(rng: &mut R, k: f64) -> Result<CheckResult, DiagnosticsError> {
    let mut dist = CellDistribution::new();
    for l in Location::ALL {
        for g in dist.gamma_mut(l) {
            *g = rng.random_range(-1.5..1.5);
        }
    }
    let sample = sample_cell(&dist, rng);
    let xs: Vec<f64> = (0..POINTS).map(|_| rng.random_range(-2.5..2.5)).collect();
    let coef: Vec<f64> = (0..POINTS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights: Vec<Vec<f64>> = sample.draws.iter().map(|d| d.weights.clone()).collect();
    let gammas: Vec<Vec<f64>> = Location::ALL
        .iter()
        .map(|&l| dist.location(l).gamma().to_vec())
        .collect();

    // Flat layout: x, then the six weight vectors, then the six γ vectors.
    let mut flat = xs.clone();
    flat.extend(weights.iter().flatten());
    flat.extend(gammas.iter().flatten());
    let lens: Vec<usize> = weights.iter().map(Vec::len).collect();

    let loss = |p: &[f64], want: bool| -> Result<(f64, Vec<f64>), CellError> {
        let mut d = dist.clone();
        let mut at = POINTS;
        let mut ws = Vec::with_capacity(lens.len());
        for &n in &lens {
            ws.push(p[at..at + n].to_vec());
            at += n;
        }
        for (l, &n) in Location::ALL.iter().zip(&lens) {
            d.gamma_mut(*l).copy_from_slice(&p[at..at + n]);
            at += n;
        }
        let mut tape = Tape::new();
        let leaves = CellLeaves::new(&mut tape, &d);
        let w: Vec<_> = ws.into_iter().map(|v| tape.param(Tensor::vector(v))).collect();
        let x = tape.param(Tensor::vector(p[..POINTS].to_vec()));
        let y = eval_relaxed(&mut tape, &d, &leaves, &w, x, DEFAULT_CLAMP)?;
        let c = tape.constant(Tensor::vector(coef.clone()));
        let prod = tape.mul(y, c).map_err(CellError::from)?;
        let l = tape.sum(prod).map_err(CellError::from)?;
        let value = tape.value(l).data()[0];
        if !want {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(l).map_err(CellError::from)?;
        let mut g = grads.get(x).expect("x is a leaf").to_vec();
        for v in w.iter().chain(&leaves.gamma) {
            g.extend(grads.get(*v).expect("leaf").to_vec());
        }
        Ok((value, g))
    };

    let (_, analytic) = loss(&flat, true)?;
    let numeric = finite_difference_grad(
        |p| loss(p, false).map(|r| r.0).unwrap_or(f64::NAN),
        &flat,
        DEFAULT_FD_STEP,
    );
    Ok(CheckResult {
        name: "cell".into(),
        points: flat.len(),
        max_rel_err: worst_of(&analytic, &numeric, k),
    })
}

/// Cross-entropy of a small residual MLP with relaxed sites against every
/// parameter.
fn check_model(seed: u64, k: f64) -> Result<CheckResult, DiagnosticsError> {
    let spec = ModelSpec::new(Family::ResidualMlp, 2, 6, 2, 2);
    let model = build_model(&spec, seed)?;
    let batch = gen_spirals(8, 0.2, seed)?.all();
    let dist = CellDistribution::new();
    let mut rng = stream(seed, &[0x4743, 1]);
    let samples: Vec<_> = (0..spec.depth).map(|_| sample_cell(&dist, &mut rng)).collect();
    let mut host = RelaxedSites::new(&dist, samples.clone(), DEFAULT_CLAMP);
    let (_, grads) = model.loss_and_grads(&batch, &mut host, true)?;
    let grads = grads.expect("requested");
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for (pi, p) in model.params().iter().enumerate() {
        let numeric = finite_difference_grad(
            |v| {
                let mut m = model.clone();
                m.params_mut()[pi].value.data_mut().copy_from_slice(v);
                let mut h = RelaxedSites::new(&dist, samples.clone(), DEFAULT_CLAMP);
                m.loss_and_grads(&batch, &mut h, false).map(|r| r.0).unwrap_or(f64::NAN)
            },
            p.value.data(),
            DEFAULT_FD_STEP,
        );
        worst = worst.max(worst_of(&grads[pi], &numeric, k));
        points += numeric.len();
    }
    Ok(CheckResult {
        name: "model".into(),
        points,
        max_rel_err: worst,
    })
}

fn worst_of(analytic: &[f64], numeric: &[f64], k: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let e = relative_error(k * a, *n);
            // NaN must fail the check rather than vanish under max.
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_names_match() {
        let results = gradient_suite(0, None).unwrap();
        let names: Vec<_> = results.iter().map(|r| r.name.clone()).collect();
        assert_eq!(names, check_names());
        assert_eq!(results.len(), 23 + 9 + 3);
        for r in &results {
            assert!(r.passed(), "{} failed: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn sabotage_fails_only_its_target() {
        for target in ["erf", "binary/gated", "cell", "model"] {
            let results = gradient_suite(1, Some(target)).unwrap();
            let failed: Vec<_> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            assert_eq!(failed.len(), 1, "{target}: {failed:?}");
            assert!(failed[0].ends_with(target), "{target}: {failed:?}");
        }
    }

    #[test]
    fn unknown_sabotage_is_rejected() {
        assert!(matches!(
            gradient_suite(0, Some("cosh")),
            Err(DiagnosticsError::UnknownCheck(_))
        ));
    }
}
