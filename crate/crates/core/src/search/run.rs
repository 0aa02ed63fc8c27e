use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{drop_ops, Anchor, DropReport, Dropped, SearchConfig, SearchError, ShrinkSchedule};
use crate::autodiff::{AutodiffError, OptimError, OptimizerConfig, OptimizerKind, OptimizerState, ParamRef};
use crate::cell::{
    rho_theta_deriv, sample_cell, CellDistribution, CellSample, DiscreteActivation, Location, Provenance, RHO_ANCHOR,
};
use crate::data::{Batch, Dataset};
use crate::model::{build_model, Activation, Model, ModelError, ModelSpec, RelaxedSites};
use crate::rng;

const SPLIT_STREAM: u64 = 0x53504c;
const MODEL_STREAM: u64 = 0x4d4f44;
const SAMPLE_STREAM: u64 = 0x534d50;
const VAL_STREAM: u64 = 0x56414c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmstart,
    Search,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Warmstart => "warmstart",
            Self::Search => "search",
        })
    }
}

/// ρ state of one location at the end of a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationSummary {
    pub location: Location,
    pub active: usize,
    pub top_op: String,
    pub top_rho: f64,
    pub min_rho: f64,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub round: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub drops: Vec<Dropped>,
    pub rho_summary: Vec<LocationSummary>,
}

fn summarize(dist: &CellDistribution) -> Vec<LocationSummary> {
    Location::ALL
        .iter()
        .map(|&l| {
            let s = dist.location(l);
            let rho = s.rho();
            let top = s.argmax();
            LocationSummary {
                location: l,
                active: s.len(),
                top_op: s.ops()[top].key().to_string(),
                top_rho: rho[top],
                min_rho: rho.iter().cloned().fold(f64::INFINITY, f64::min),
            }
        })
        .collect()
}

/// Everything a finished search produces.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub activation: DiscreteActivation,
    pub formula: String,
    pub events: Vec<Event>,
    pub distribution: CellDistribution,
    pub model: Model,
}

impl SearchOutcome {
    /// The event log as newline-delimited JSON.
    pub fn events_jsonl(&self) -> String {
        events_jsonl(&self.events)
    }
}

fn events_jsonl(events: &[Event]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
        .collect()
}

/// Cycles through seeded permutations of the validation set.
#[derive(Clone, Debug)]
struct ValCursor {
    seed: u64,
    pass: u64,
    order: Vec<Vec<usize>>,
    next: usize,
}

impl ValCursor {
    fn take(&mut self, data: &Dataset, batch_size: usize) -> Result<Batch, SearchError> {
        if self.next == self.order.len() {
            self.order = data.batch_indices(batch_size, self.seed, self.pass)?;
            self.pass += 1;
            self.next = 0;
        }
        self.next += 1;
        Ok(data.gather(&self.order[self.next - 1]))
    }
}

/// State of one search: the cell distribution, the network and both
/// optimizers. Rounds are numbered from 1; rounds `1..=E₀` warm-start.
pub struct SearchRun {
    config: SearchConfig,
    pub(super) dist: CellDistribution,
    pub(super) model: Model,
    train: Dataset,
    val: Dataset,
    inner: OptimizerState,
    outer: OptimizerState,
    schedule: ShrinkSchedule,
    samples: ChaCha8Rng,
    val_cursor: ValCursor,
    round: usize,
    events: Vec<Event>,
    last_drops: Vec<Dropped>,
}

/// Non-finite values anywhere in a forward or backward pass.
fn diverged(e: &ModelError) -> bool {
    match e {
        ModelError::NonFiniteLoss { .. }
        | ModelError::Autodiff(AutodiffError::NonFinite { .. })
        | ModelError::Optim(OptimError::NonFiniteGradient { .. }) => true,
        ModelError::Site { source, .. } => diverged(source),
        _ => false,
    }
}

/// Seed from which the run's network is initialized.
pub fn model_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[MODEL_STREAM])
}

/// Seed of the train/validation split.
pub fn split_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[SPLIT_STREAM])
}

impl SearchRun {
    /// Starts a run over `(train, val)` with an already built network.
    pub fn new(
        config: SearchConfig,
        dist: CellDistribution,
        model: Model,
        train: Dataset,
        val: Dataset,
    ) -> Result<Self, SearchError> {
        config.validate()?;
        let schedule = config.schedule()?;
        let outer_config = match config.anchor {
            Anchor::Penalty { .. } => config.outer,
            Anchor::WeightDecay { decay } => {
                let (beta1, beta2) = match config.outer.kind {
                    OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::AdamW { beta1, beta2 } => (beta1, beta2),
                    OptimizerKind::Sgd { .. } => {
                        return Err(SearchError::InvalidConfig(
                            "weight-decay anchoring needs an adaptive outer optimizer".into(),
                        ));
                    }
                };
                OptimizerConfig {
                    eps: config.outer.eps,
                    ..OptimizerConfig::adamw(config.outer.lr, beta1, beta2, decay)
                }
            }
        };
        Ok(Self {
            samples: rng::stream(config.seed, &[SAMPLE_STREAM]),
            val_cursor: ValCursor {
                seed: rng::derive_seed(config.seed, &[VAL_STREAM]),
                pass: 0,
                order: Vec::new(),
                next: 0,
            },
            inner: OptimizerState::new(config.inner),
            outer: OptimizerState::new(outer_config),
            config,
            dist,
            model,
            train,
            val,
            schedule,
            round: 0,
            events: Vec::new(),
            last_drops: Vec::new(),
        })
    }

    /// Splits `data`, builds the network and starts from the full space.
    pub fn from_dataset(config: SearchConfig, spec: &ModelSpec, data: &Dataset) -> Result<Self, SearchError> {
        config.validate()?;
        let (train, val) = data.split(config.split, split_seed(config.seed))?;
        let model = build_model(spec, model_seed(config.seed))?;
        Self::new(config, CellDistribution::new(), model, train, val)
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn distribution(&self) -> &CellDistribution {
        &self.dist
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn schedule(&self) -> &ShrinkSchedule {
        &self.schedule
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.total_rounds
    }

    fn fresh_samples(&mut self) -> Vec<CellSample> {
        (0..self.model.site_count())
            .map(|_| sample_cell(&self.dist, &mut self.samples))
            .collect()
    }

    /// One ρ/γ update on `accumulation` validation batches; returns the
    /// validation loss (without the anchor term).
    pub(super) fn outer_update(&mut self) -> Result<f64, SearchError> {
        let mut batches = Vec::with_capacity(self.config.accumulation);
        for _ in 0..self.config.accumulation {
            batches.push(self.val_cursor.take(&self.val, self.config.batch_size)?);
        }
        let total: usize = batches.iter().map(|b| b.labels.len()).sum();
        let mut rho_grad: Vec<Vec<f64>> = Location::ALL
            .iter()
            .map(|&l| vec![0.0; self.dist.location(l).len()])
            .collect();
        let mut gamma_grad = rho_grad.clone();
        let mut loss = 0.0;
        for batch in &batches {
            let share = batch.labels.len() as f64 / total as f64;
            let samples = self.fresh_samples();
            let mut host = RelaxedSites::new(&self.dist, samples, self.config.clamp);
            let (l, _) = self.model.loss_and_grads(batch, &mut host, false)?;
            loss += share * l;
            for (acc, g) in rho_grad.iter_mut().zip(host.rho_grads()?) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += share * g);
            }
            for (acc, g) in gamma_grad.iter_mut().zip(&host.gamma_grads) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += share * g);
            }
        }
        let lambda = match self.config.anchor {
            Anchor::Penalty { lambda } => lambda,
            Anchor::WeightDecay { .. } => 0.0,
        };
        // ∂/∂θ through ρ = softplus(θ) + floor, plus the anchor term.
        let theta_grad: Vec<Vec<f64>> = Location::ALL
            .iter()
            .zip(&rho_grad)
            .map(|(&l, g)| {
                let s = self.dist.location(l);
                s.theta()
                    .iter()
                    .zip(s.rho())
                    .zip(g)
                    .map(|((&t, r), &g)| (g + 2.0 * lambda * (r - RHO_ANCHOR)) * rho_theta_deriv(t))
                    .collect()
            })
            .collect();
        let names: Vec<(String, String)> = Location::ALL
            .iter()
            .map(|l| (format!("{}.theta", l.name()), format!("{}.gamma", l.name())))
            .collect();
        let mut refs = Vec::with_capacity(12);
        for (((theta, gamma), (tn, gn)), (tg, gg)) in self
            .dist
            .params_mut()
            .into_iter()
            .zip(&names)
            .zip(theta_grad.iter().zip(&gamma_grad))
        {
            refs.push(ParamRef {
                name: tn,
                value: theta,
                grad: tg,
                decay: true,
            });
            refs.push(ParamRef {
                name: gn,
                value: gamma,
                grad: gg,
                decay: false,
            });
        }
        self.outer.step(&mut refs)?;
        Ok(loss)
    }

    /// Applies the drops due this round and trims the matching outer
    /// optimizer state.
    fn shrink(&mut self) -> Result<DropReport, SearchError> {
        let due = self.schedule.drops_at(self.round + 1);
        let report = drop_ops(&mut self.dist, due)?;
        for d in &report.dropped {
            let slot = 2 * d.location.index();
            self.outer.remove_element(slot, d.index);
            self.outer.remove_element(slot + 1, d.index);
        }
        Ok(report)
    }

    /// Runs the next round. Each batch group first updates ρ and γ on
    /// validation data, then the weights on training data: with the
    /// original activation while warm-starting, with freshly sampled cells
    /// afterwards.
    pub fn step_round(&mut self) -> Result<&Event, SearchError> {
        if self.is_finished() {
            return Err(SearchError::InvalidConfig(format!(
                "all {} rounds already ran",
                self.config.total_rounds
            )));
        }
        let round = self.round + 1;
        let phase = if round <= self.config.warmstart_rounds {
            Phase::Warmstart
        } else {
            Phase::Search
        };
        let report = if phase == Phase::Search && self.config.shrink {
            self.shrink()?
        } else {
            DropReport::default()
        };
        if !report.dropped.is_empty() {
            self.last_drops = report.dropped.clone();
        }
        let result = self.run_groups(round, phase);
        let (train_loss, val_loss) = result.map_err(|e| match e {
            SearchError::Model(source) if diverged(&source) => SearchError::Divergence {
                round,
                phase,
                last_drops: self.last_drops.iter().map(ToString::to_string).collect(),
                source,
            },
            SearchError::Optim(source @ OptimError::NonFiniteGradient { .. }) => SearchError::Divergence {
                round,
                phase,
                last_drops: self.last_drops.iter().map(ToString::to_string).collect(),
                source: ModelError::Optim(source),
            },
            other => other,
        })?;
        self.round = round;
        self.events.push(Event {
            round,
            phase,
            train_loss,
            val_loss,
            drops: report.dropped,
            rho_summary: summarize(&self.dist),
        });
        Ok(self.events.last().expect("just pushed"))
    }

    fn run_groups(&mut self, round: usize, phase: Phase) -> Result<(f64, f64), SearchError> {
        let order = self
            .train
            .batch_indices(self.config.batch_size, self.config.seed, (round - 1) as u64)?;
        let groups = order.chunks(self.config.accumulation);
        let count = groups.len() as f64;
        let (mut train_loss, mut val_loss) = (0.0, 0.0);
        let mut original = Activation::Baseline(self.model.spec().original);
        for group in groups {
            val_loss += self.outer_update()?;
            let batches: Vec<Batch> = group.iter().map(|idx| self.train.gather(idx)).collect();
            train_loss += match phase {
                Phase::Warmstart => self.model.train_group(&batches, &mut self.inner, &mut original)?,
                Phase::Search => {
                    let (mut loss, mut grads) = (0.0, Vec::new());
                    let total: usize = batches.iter().map(|b| b.labels.len()).sum();
                    for batch in &batches {
                        let samples = self.fresh_samples();
                        let mut host = RelaxedSites::new(&self.dist, samples, self.config.clamp);
                        let (l, g) = self.model.group_gradients(std::slice::from_ref(batch), &mut host)?;
                        let share = batch.labels.len() as f64 / total as f64;
                        loss += share * l;
                        if grads.is_empty() {
                            grads = g.iter().map(|v| vec![0.0; v.len()]).collect();
                        }
                        for (a, g) in grads.iter_mut().zip(g) {
                            a.iter_mut().zip(g).for_each(|(a, g): (&mut f64, f64)| *a += share * g);
                        }
                    }
                    self.model.apply_gradients(&mut self.inner, &grads)?;
                    loss
                }
            };
        }
        Ok((train_loss / count, val_loss / count))
    }

    /// Runs every remaining round and discretizes by argmax.
    pub fn finish(mut self, run_id: &str) -> Result<SearchOutcome, SearchError> {
        while !self.is_finished() {
            self.step_round()?;
        }
        let activation = self
            .dist
            .discretize(Provenance::new(self.config.seed, self.round, run_id));
        Ok(SearchOutcome {
            formula: activation.formula(),
            activation,
            events: self.events,
            distribution: self.dist,
            model: self.model,
        })
    }
}

/// Warm-start, then shrinking search rounds until one op per location is
/// left.
pub fn run_grafs(config: &SearchConfig, spec: &ModelSpec, data: &Dataset) -> Result<SearchOutcome, SearchError> {
    let config = SearchConfig {
        shrink: true,
        ..config.clone()
    };
    let run_id = format!("grafs-seed{}", config.seed);
    SearchRun::from_dataset(config, spec, data)?.finish(&run_id)
}

/// The same loop without shrinking; every op stays active and the result is
/// the argmax at the end.
pub fn run_drnas_baseline(
    config: &SearchConfig,
    spec: &ModelSpec,
    data: &Dataset,
) -> Result<SearchOutcome, SearchError> {
    let config = SearchConfig {
        shrink: false,
        ..config.clone()
    };
    let run_id = format!("drnas-seed{}", config.seed);
    SearchRun::from_dataset(config, spec, data)?.finish(&run_id)
}
