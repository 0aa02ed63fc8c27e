//! Bi-level activation search: warm-start, progressive shrinking of the
//! cell on a logarithmic schedule, and the non-shrinking baseline.

mod run;
mod schedule;


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{OptimError, OptimizerConfig};
use crate::cell::{CellDistribution, CellError, Location, OpId, RHO_ANCHOR};
use crate::data::DataError;
use crate::model::ModelError;
use crate::ops::DEFAULT_CLAMP;

pub use run::{
    model_seed, run_drnas_baseline, run_grafs, split_seed, Event, LocationSummary, Phase, SearchOutcome, SearchRun,
};
pub use schedule::{build_shrink_schedule, ShrinkSchedule};

/// Ops in the full search space: four edges of 23 and two vertices of 9.
pub const FULL_SPACE: usize = 4 * 23 + 2 * 9;

/// Ops left once every location is decided.
pub const FINAL_OPS: usize = 6;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("shrink schedule needs end > start ≥ 1, got start {start}, end {end}")]
    Schedule { start: usize, end: usize },
    #[error("diverged in round {round} ({phase}); last drops: [{}]: {source}", last_drops.join(", "))]
    Divergence {
        round: usize,
        phase: Phase,
        last_drops: Vec<String>,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// How the outer objective keeps ρ near the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Anchor {
    /// `λ·Σ(ρ − 1)²` added to the validation loss.
    Penalty { lambda: f64 },
    /// Decoupled weight decay on θ in the outer optimizer.
    WeightDecay { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Total rounds `E`.
    pub total_rounds: usize,
    /// Warm-start rounds `E₀`.
    pub warmstart_rounds: usize,
    pub split: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub inner: OptimizerConfig,
    pub outer: OptimizerConfig,
    pub anchor: Anchor,
    pub clamp: f64,
    pub seed: u64,
    /// Progressive shrinking; off gives the plain Dirichlet search.
    pub shrink: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            total_rounds: 20,
            warmstart_rounds: 2,
            split: 0.75,
            batch_size: 32,
            accumulation: 1,
            inner: OptimizerConfig::sgd(0.01, 0.9, 1e-4),
            outer: OptimizerConfig::adam(6e-4, 0.5, 0.999),
            anchor: Anchor::Penalty { lambda: 1e-3 },
            clamp: DEFAULT_CLAMP,
            seed: 0,
            shrink: true,
        }
    }
}

impl SearchConfig {
    /// First shrinking round `S = 2E₀`, at least 1.
    pub fn shrink_start(&self) -> usize {
        (2 * self.warmstart_rounds).max(1)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        let s = self.shrink_start();
        if self.total_rounds <= s {
            return bad(format!(
                "total rounds {} must exceed the shrink start {s} (twice the {} warm-start rounds)",
                self.total_rounds, self.warmstart_rounds
            ));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split {} must lie strictly between 0 and 1", self.split));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return bad("batch size and accumulation steps must be positive".into());
        }
        match self.anchor {
            Anchor::Penalty { lambda: v } | Anchor::WeightDecay { decay: v } if !(v >= 0.0 && v.is_finite()) => {
                return bad(format!("anchor weight {v} must be finite and ≥ 0"));
            }
            _ => {}
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad(format!("clamp {} must be positive", self.clamp));
        }
        for (name, o) in [("inner", &self.inner), ("outer", &self.outer)] {
            if !(o.lr > 0.0 && o.lr.is_finite()) {
                return bad(format!("{name} learning rate {} must be positive", o.lr));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ShrinkSchedule, SearchError> {
        build_shrink_schedule(FULL_SPACE, FINAL_OPS, self.shrink_start(), self.total_rounds)
    }
}

/// One op removed by [`drop_ops`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub location: Location,
    pub op: OpId,
    /// Position the op held before removal.
    pub index: usize,
    pub rho: f64,
}

impl std::fmt::Display for Dropped {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{} (ρ={:.4})", self.location, self.op, self.rho)
    }
}

/// Result of [`drop_ops`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped: Vec<Dropped>,
    /// Drops that could not happen because every location was down to one
    /// op.
    pub skipped: usize,
}

/// Removes `count` ops, each time the lowest-ρ op of the location with the
/// most ops left (ties resolved in location order).
pub fn drop_ops(dist: &mut CellDistribution, count: usize) -> Result<DropReport, CellError> {
    let mut report = DropReport::default();
    for done in 0..count {
        let counts = dist.counts();
        let (best, &most) = counts
            .iter()
            .enumerate()
            .fold((0, &counts[0]), |acc, (i, c)| if *c > *acc.1 { (i, c) } else { acc });
        if most <= 1 {
            report.skipped = count - done;
            break;
        }
        let location = Location::ALL[best];
        let state = dist.location(location);
        let rho = state.rho()[state.lowest()];
        let (op, index) = dist.drop_lowest(location)?;
        report.dropped.push(Dropped {
            location,
            op,
            index,
            rho,
        });
    }
    Ok(report)
}

/// `λ·Σ(ρ − 1)²` over every active op.
pub fn anchor_penalty(dist: &CellDistribution, lambda: f64) -> f64 {
    Location::ALL
        .iter()
        .flat_map(|&l| dist.rho(l))
        .map(|r| (r - RHO_ANCHOR).powi(2))
        .sum::<f64>()
        * lambda
}
