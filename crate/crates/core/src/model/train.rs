use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerConfig, OptimizerState, ParamRef};
use crate::data::{Batch, Dataset};

use super::{build_model, Activation, Model, ModelError, ModelSpec, SiteHost};
use crate::rng::derive_seed;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches whose gradients are combined into one update.
    pub accumulation: usize,
    pub optimizer: OptimizerConfig,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            accumulation: 1,
            optimizer: OptimizerConfig::sgd(0.01, 0.9, 1e-4),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Mean and standard error of the mean over independent runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Absent for a single run.
    pub se: Option<f64>,
    pub n: usize,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.se {
            Some(se) => write!(f, "{:.3} ± {:.3}", self.mean, se),
            None => write!(f, "{:.3} ± n/a", self.mean),
        }
    }
}

/// Sample standard deviation over `√k`; `None` for an empty slice.
pub fn aggregate(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Some(Summary { mean, se, n })
}

impl Model {
    /// Per-sample mean loss over `batches` and the matching gradient, as if
    /// they formed one batch.
    pub fn group_gradients(
        &self,
        batches: &[Batch],
        host: &mut dyn SiteHost,
    ) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let total: usize = batches.iter().map(|b| b.labels.len()).sum();
        let mut acc: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut loss = 0.0;
        for batch in batches {
            let share = batch.labels.len() as f64 / total as f64;
            let (l, g) = self.loss_and_grads(batch, host, true)?;
            loss += share * l;
            for (a, g) in acc.iter_mut().zip(g.expect("requested")) {
                for (ai, gi) in a.iter_mut().zip(g) {
                    *ai += share * gi;
                }
            }
        }
        Ok((loss, acc))
    }

    /// Applies `grads` (one per parameter) through `opt`.
    pub fn apply_gradients(&mut self, opt: &mut OptimizerState, grads: &[Vec<f64>]) -> Result<(), ModelError> {
        let mut refs: Vec<ParamRef<'_>> = self
            .params
            .iter_mut()
            .zip(grads)
            .map(|(p, g)| ParamRef {
                name: &p.name,
                value: p.value.data_mut(),
                grad: g,
                decay: p.decay,
            })
            .collect();
        opt.step(&mut refs)?;
        Ok(())
    }

    /// One update from the combined gradient of `batches`; returns the loss.
    pub fn train_group(
        &mut self,
        batches: &[Batch],
        opt: &mut OptimizerState,
        host: &mut dyn SiteHost,
    ) -> Result<f64, ModelError> {
        let (loss, grads) = self.group_gradients(batches, host)?;
        self.apply_gradients(opt, &grads)?;
        Ok(loss)
    }

    pub fn train_step(
        &mut self,
        batch: &Batch,
        opt: &mut OptimizerState,
        host: &mut dyn SiteHost,
    ) -> Result<f64, ModelError> {
        self.train_group(std::slice::from_ref(batch), opt, host)
    }
}

/// One pass over `data` in the batch order fixed by `(seed, epoch)`;
/// returns the per-update losses.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    data: &Dataset,
    batch_size: usize,
    accumulation: usize,
    seed: u64,
    epoch: u64,
    host: &mut dyn SiteHost,
) -> Result<Vec<f64>, ModelError> {
    let order = data.batch_indices(batch_size, seed, epoch)?;
    let mut losses = Vec::with_capacity(order.len().div_ceil(accumulation.max(1)));
    for group in order.chunks(accumulation.max(1)) {
        let batches: Vec<Batch> = group.iter().map(|idx| data.gather(idx)).collect();
        losses.push(model.train_group(&batches, opt, host)?);
    }
    Ok(losses)
}

/// Plain training for `config.epochs` epochs; returns the mean update loss
/// per epoch.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    host: &mut dyn SiteHost,
) -> Result<Vec<f64>, ModelError> {
    let mut opt = OptimizerState::new(config.optimizer);
    (0..config.epochs)
        .map(|epoch| {
            let l = train_epoch(
                model,
                &mut opt,
                data,
                config.batch_size,
                config.accumulation,
                config.seed,
                epoch as u64,
                host,
            )?;
            Ok(l.iter().sum::<f64>() / l.len() as f64)
        })
        .collect()
}

/// Accuracy and mean cross-entropy over the whole of `data`.
pub fn evaluate(model: &Model, data: &Dataset, host: &mut dyn SiteHost) -> Result<Metrics, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let n = data.len();
    let (mut correct, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.gather(chunk);
        let logits = model.logits(&batch.features, host)?;
        let c = model.spec().classes;
        for (row, &label) in logits.data().chunks(c).zip(&batch.labels) {
            // Ties resolve to the lowest class index.
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(pred == label);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            loss,
            ranges: Vec::new(),
        });
    }
    Ok(Metrics {
        accuracy: correct as f64 / n as f64,
        loss,
    })
}

/// Sub-stream for retraining initializations; distinct from the search
/// model's stream so the two never share weights by accident.
const RETRAIN_STREAM: u64 = 0x5254;

/// Trains a fresh `spec` network with `act` at every site on `train_set`
/// and scores it on `test_set`. The initialization depends only on
/// `config.seed`, so two activations compared under one seed start from
/// identical weights.
pub fn retrain(
    spec: &ModelSpec,
    act: &Activation,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<Metrics, ModelError> {
    let mut model = build_model(spec, derive_seed(config.seed, &[RETRAIN_STREAM]))?;
    let mut host = act.clone();
    train(&mut model, train_set, config, &mut host)?;
    evaluate(&model, test_set, &mut host)
}
