//! The searchable activation cell
//! `f(x) = B_top(U3(B_bot(U1(x), U2(x))), U4(x))`, its Dirichlet-relaxed
//! distribution over operations, and the discretized result.

mod discrete;
mod relaxed;
mod sample;
pub mod symbolic;

#[cfg(test)]
mod tests;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::ops::{scalar, BinaryOpId, OpError, UnaryOpId};

pub use discrete::{DiscreteActivation, Provenance, ACTIVATION_FORMAT};
pub use relaxed::{eval_relaxed, CellLeaves};
pub use sample::{dirichlet_backward, sample_cell, CellSample, SimplexDraw};

/// Additive floor keeping every concentration strictly positive.
pub const RHO_FLOOR: f64 = 1e-3;

/// Concentration every op starts at (the anchor ρ̂).
pub const RHO_ANCHOR: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("cannot drop the last operation at {0}")]
    LastOp(Location),
    #[error("operation {op} is not active at {location}")]
    NotActive { location: Location, op: OpId },
    #[error("{location}: sample has {found} weights for {expected} active operations")]
    Arity {
        location: Location,
        expected: usize,
        found: usize,
    },
    #[error("concentration {0} is not above the floor {RHO_FLOOR}")]
    InvalidRho(f64),
    #[error("operation {op} cannot sit at {location}")]
    WrongKind { location: Location, op: OpId },
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The six op-bearing positions, in the fixed tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    U1,
    U2,
    U3,
    U4,
    BBot,
    BTop,
}

impl Location {
    pub const ALL: [Location; 6] = [Self::U1, Self::U2, Self::U3, Self::U4, Self::BBot, Self::BTop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_unary(self) -> bool {
        !matches!(self, Self::BBot | Self::BTop)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::U1 => "u1",
            Self::U2 => "u2",
            Self::U3 => "u3",
            Self::U4 => "u4",
            Self::BBot => "b_bot",
            Self::BTop => "b_top",
        }
    }

    /// The full op list a location starts with.
    pub fn all_ops(self) -> Vec<OpId> {
        if self.is_unary() {
            UnaryOpId::ALL.iter().map(|&u| OpId::Unary(u)).collect()
        } else {
            BinaryOpId::ALL.iter().map(|&b| OpId::Binary(b)).collect()
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An op at some location; unary ops live on edges, binary on vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OpId {
    Unary(UnaryOpId),
    Binary(BinaryOpId),
}

impl OpId {
    pub fn key(self) -> &'static str {
        match self {
            Self::Unary(u) => u.key(),
            Self::Binary(b) => b.key(),
        }
    }

    pub fn takes_gamma(self) -> bool {
        match self {
            Self::Unary(u) => u.takes_gamma(),
            Self::Binary(b) => b.takes_gamma(),
        }
    }

    pub fn initial_gamma(self) -> f64 {
        match self {
            Self::Unary(u) => u.initial_gamma(),
            Self::Binary(b) => b.initial_gamma(),
        }
    }

    fn fits(self, location: Location) -> bool {
        matches!(self, Self::Unary(_)) == location.is_unary()
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// `ρ = softplus(θ) + RHO_FLOOR`.
pub fn rho_of_theta(theta: f64) -> f64 {
    scalar::softplus(theta) + RHO_FLOOR
}

/// `dρ/dθ`.
pub fn rho_theta_deriv(theta: f64) -> f64 {
    scalar::sigmoid(theta)
}

pub fn theta_of_rho(rho: f64) -> Result<f64, CellError> {
    if rho > RHO_FLOOR && rho.is_finite() {
        Ok(scalar::softplus_inv(rho - RHO_FLOOR))
    } else {
        Err(CellError::InvalidRho(rho))
    }
}

/// Active ops at one location with their unconstrained concentrations `θ`
/// and γ values. The three vectors stay index-aligned; ops without γ keep
/// an inert entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationState {
    ops: Vec<OpId>,
    theta: Vec<f64>,
    gamma: Vec<f64>,
}

impl LocationState {
    fn full(location: Location) -> Self {
        let ops = location.all_ops();
        let theta0 = theta_of_rho(RHO_ANCHOR).expect("anchor is above the floor");
        Self {
            theta: vec![theta0; ops.len()],
            gamma: ops.iter().map(|o| o.initial_gamma()).collect(),
            ops,
        }
    }

    pub fn ops(&self) -> &[OpId] {
        &self.ops
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| rho_of_theta(t)).collect()
    }

    pub fn position(&self, op: OpId) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }

    /// Index of the lowest-ρ op; ties go to the earliest enumerated op.
    pub fn lowest(&self) -> usize {
        self.extreme(|a, b| a < b)
    }

    /// Index of the highest-ρ op; ties go to the earliest enumerated op.
    pub fn argmax(&self) -> usize {
        self.extreme(|a, b| a > b)
    }

    // `ops` is kept in enumeration order, so a strict comparison already
    // prefers the lowest index on ties.
    fn extreme(&self, better: impl Fn(f64, f64) -> bool) -> usize {
        let mut best = 0;
        for i in 1..self.theta.len() {
            if better(self.theta[i], self.theta[best]) {
                best = i;
            }
        }
        best
    }
}

/// Per-location Dirichlet concentrations over active ops, plus γ values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDistribution {
    locations: Vec<LocationState>,
}

impl Default for CellDistribution {
    fn default() -> Self {
        Self::new()
    }
}

impl CellDistribution {
    /// All 23 unary ops on each edge and all 9 binary ops on each vertex,
    /// every ρ at the anchor.
    pub fn new() -> Self {
        Self {
            locations: Location::ALL.iter().map(|&l| LocationState::full(l)).collect(),
        }
    }

    /// A distribution whose active ops are exactly `ops`, each at the anchor.
    pub fn with_ops(ops: [Vec<OpId>; 6]) -> Result<Self, CellError> {
        let mut locations = Vec::with_capacity(6);
        for (location, mut list) in Location::ALL.into_iter().zip(ops) {
            if let Some(&op) = list.iter().find(|o| !o.fits(location)) {
                return Err(CellError::WrongKind { location, op });
            }
            list.sort();
            list.dedup();
            if list.is_empty() {
                return Err(CellError::LastOp(location));
            }
            let theta0 = theta_of_rho(RHO_ANCHOR)?;
            locations.push(LocationState {
                theta: vec![theta0; list.len()],
                gamma: list.iter().map(|o| o.initial_gamma()).collect(),
                ops: list,
            });
        }
        Ok(Self { locations })
    }

    pub fn location(&self, location: Location) -> &LocationState {
        &self.locations[location.index()]
    }

    pub fn rho(&self, location: Location) -> Vec<f64> {
        self.location(location).rho()
    }

    pub fn active_count(&self) -> usize {
        self.locations.iter().map(LocationState::len).sum()
    }

    pub fn counts(&self) -> [usize; 6] {
        std::array::from_fn(|i| self.locations[i].len())
    }

    pub fn is_fully_discrete(&self) -> bool {
        self.locations.iter().all(|l| l.len() == 1)
    }

    pub fn theta_mut(&mut self, location: Location) -> &mut [f64] {
        &mut self.locations[location.index()].theta
    }

    pub fn gamma_mut(&mut self, location: Location) -> &mut [f64] {
        &mut self.locations[location.index()].gamma
    }

    /// Mutable `(θ, γ)` slices for every location, in location order.
    pub fn params_mut(&mut self) -> Vec<(&mut [f64], &mut [f64])> {
        self.locations
            .iter_mut()
            .map(|l| (l.theta.as_mut_slice(), l.gamma.as_mut_slice()))
            .collect()
    }

    pub fn set_rho(&mut self, location: Location, rho: &[f64]) -> Result<(), CellError> {
        let state = &mut self.locations[location.index()];
        if rho.len() != state.len() {
            return Err(CellError::Arity {
                location,
                expected: state.len(),
                found: rho.len(),
            });
        }
        let theta = rho.iter().map(|&r| theta_of_rho(r)).collect::<Result<Vec<_>, _>>()?;
        state.theta = theta;
        Ok(())
    }

    pub fn set_gamma(&mut self, location: Location, op: OpId, gamma: f64) -> Result<(), CellError> {
        let state = &mut self.locations[location.index()];
        let i = state.position(op).ok_or(CellError::NotActive { location, op })?;
        state.gamma[i] = gamma;
        Ok(())
    }

    /// Removes `op` from `location`, returning the index it occupied. The
    /// remaining concentrations are left unchanged.
    pub fn drop_op(&mut self, location: Location, op: OpId) -> Result<usize, CellError> {
        let state = &mut self.locations[location.index()];
        let i = state.position(op).ok_or(CellError::NotActive { location, op })?;
        if state.len() < 2 {
            return Err(CellError::LastOp(location));
        }
        state.ops.remove(i);
        state.theta.remove(i);
        state.gamma.remove(i);
        Ok(i)
    }

    /// Drops the lowest-ρ op at `location`; returns it and its former index.
    pub fn drop_lowest(&mut self, location: Location) -> Result<(OpId, usize), CellError> {
        let state = self.location(location);
        let op = state.ops[state.lowest()];
        let i = self.drop_op(location, op)?;
        Ok((op, i))
    }

    /// Keeps the argmax-ρ op at every location, freezing its γ.
    pub fn discretize(&self, provenance: Provenance) -> DiscreteActivation {
        let pick = |l: Location| {
            let s = self.location(l);
            let i = s.argmax();
            (s.ops[i], s.gamma[i])
        };
        let unary = |l: Location| match pick(l) {
            (OpId::Unary(u), g) => (u, g),
            _ => unreachable!("edges hold unary ops"),
        };
        let binary = |l: Location| match pick(l) {
            (OpId::Binary(b), g) => (b, g),
            _ => unreachable!("vertices hold binary ops"),
        };
        DiscreteActivation::new(
            [
                unary(Location::U1),
                unary(Location::U2),
                unary(Location::U3),
                unary(Location::U4),
            ],
            [binary(Location::BBot), binary(Location::BTop)],
            provenance,
        )
    }
}
