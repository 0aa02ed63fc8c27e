use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Gradients, Tape, Var};
use crate::cell::{eval_relaxed, CellDistribution, CellLeaves, CellSample, DiscreteActivation, Location};
use crate::ops::{Baseline, FormulaId};

use super::ModelError;

/// What runs at each activation site during a forward pass.
pub trait SiteHost {
    /// Records site `site` applied elementwise to `x`.
    fn apply(&mut self, tape: &mut Tape, site: usize, x: Var) -> Result<Var, ModelError>;

    /// Number of distinct sites served, `None` when unlimited.
    fn sites(&self) -> Option<usize> {
        None
    }

    /// Records host-owned leaves before the network.
    fn bind(&mut self, _tape: &mut Tape, _trainable: bool) -> Result<(), ModelError> {
        Ok(())
    }

    /// Reads host-owned gradients after the backward sweep.
    fn collect(&mut self, _tape: &Tape, _grads: &Gradients) -> Result<(), ModelError> {
        Ok(())
    }
}

/// A fixed scalar activation shared by every site.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Baseline(Baseline),
    Formula(FormulaId),
    /// A discretized cell, optionally clamping every op output like the
    /// relaxed cell does.
    Discrete {
        cell: Box<DiscreteActivation>,
        clamp: Option<f64>,
    },
}

impl Activation {
    pub fn discrete(cell: DiscreteActivation) -> Self {
        Self::Discrete {
            cell: Box::new(cell),
            clamp: None,
        }
    }

    /// `(f(x), f'(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            Self::Baseline(b) => b.eval(x),
            Self::Formula(id) => id.eval_with_grad(x),
            Self::Discrete { cell, clamp } => cell.eval_clamped(x, *clamp),
        }
    }

    /// Baseline names and built-in formula ids.
    pub fn builtin(name: &str) -> Result<Self, ModelError> {
        if let Ok(b) = Baseline::from_str(name) {
            return Ok(Self::Baseline(b));
        }
        FormulaId::from_str(name)
            .map(Self::Formula)
            .map_err(|_| ModelError::UnknownActivation(name.to_string()))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Baseline(b) => write!(f, "{b}"),
            Self::Formula(id) => write!(f, "{id}"),
            Self::Discrete { cell, .. } => write!(f, "{}", cell.formula()),
        }
    }
}

impl SiteHost for Activation {
    fn apply(&mut self, tape: &mut Tape, _site: usize, x: Var) -> Result<Var, ModelError> {
        let act = &*self;
        Ok(tape.map(x, |v| act.eval(v))?)
    }
}

/// Relaxed cells at every site: one shared distribution, one independent
/// sample per site, γ leaves shared across sites.
pub struct RelaxedSites<'a> {
    dist: &'a CellDistribution,
    samples: Vec<CellSample>,
    clamp: f64,
    leaves: Option<CellLeaves>,
    weights: Vec<Vec<Var>>,
    /// `∂L/∂γ` per location, filled by `collect`.
    pub gamma_grads: Vec<Vec<f64>>,
    /// `∂L/∂weights` per site and location, filled by `collect`.
    pub weight_grads: Vec<Vec<Vec<f64>>>,
}

impl<'a> RelaxedSites<'a> {
    pub fn new(dist: &'a CellDistribution, samples: Vec<CellSample>, clamp: f64) -> Self {
        Self {
            dist,
            samples,
            clamp,
            leaves: None,
            weights: Vec::new(),
            gamma_grads: Vec::new(),
            weight_grads: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[CellSample] {
        &self.samples
    }

    /// `∂L/∂ρ` per location, summed over sites.
    pub fn rho_grads(&self) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut total: Vec<Vec<f64>> = Location::ALL
            .iter()
            .map(|&l| vec![0.0; self.dist.location(l).len()])
            .collect();
        for (sample, upstream) in self.samples.iter().zip(&self.weight_grads) {
            for (t, g) in total.iter_mut().zip(sample.rho_grad(self.dist, upstream)?) {
                for (ti, gi) in t.iter_mut().zip(g) {
                    *ti += gi;
                }
            }
        }
        Ok(total)
    }
}

impl SiteHost for RelaxedSites<'_> {
    fn apply(&mut self, tape: &mut Tape, site: usize, x: Var) -> Result<Var, ModelError> {
        let leaves = self.leaves.as_ref().expect("bind precedes apply");
        let weights = self.weights.get(site).ok_or(ModelError::SiteCount {
            needed: site + 1,
            provided: self.weights.len(),
        })?;
        Ok(eval_relaxed(tape, self.dist, leaves, weights, x, self.clamp)?)
    }

    fn sites(&self) -> Option<usize> {
        Some(self.samples.len())
    }

    fn bind(&mut self, tape: &mut Tape, _trainable: bool) -> Result<(), ModelError> {
        self.leaves = Some(CellLeaves::new(tape, self.dist));
        self.weights = self.samples.iter().map(|s| CellLeaves::site_weights(tape, s)).collect();
        Ok(())
    }

    fn collect(&mut self, tape: &Tape, grads: &Gradients) -> Result<(), ModelError> {
        let read = |v: Var| {
            grads
                .get(v)
                .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
        };
        let leaves = self.leaves.as_ref().expect("bind precedes collect");
        self.gamma_grads = leaves.gamma.iter().map(|&v| read(v)).collect();
        self.weight_grads = self
            .weights
            .iter()
            .map(|site| site.iter().map(|&v| read(v)).collect())
            .collect();
        Ok(())
    }
}
