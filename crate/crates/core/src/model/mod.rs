//! Small trainable networks whose activation sites can host a fixed
//! activation or the relaxed cell.

mod checkpoint;
mod sites;
mod train;


use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, OptimError, Tape, Var};
use crate::cell::CellError;
use crate::data::Batch;
use crate::ops::Baseline;
use crate::{rng, Tensor};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
/// Batch loss and, when requested, one gradient vector per parameter.
pub type LossAndGrads = (f64, Option<Vec<Vec<f64>>>);

pub use sites::{Activation, RelaxedSites, SiteHost};
pub use train::{aggregate, evaluate, retrain, train, train_epoch, Metrics, Summary, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("batch has {found} features per row, model expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("activation site {site}: {source}")]
    Site {
        site: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("non-finite loss {loss} (site input ranges {ranges:?})")]
    NonFiniteLoss { loss: f64, ranges: Vec<(f64, f64)> },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("activation {0:?} is unknown")]
    UnknownActivation(String),
    #[error("site host provides {provided} sites, model has {needed}")]
    SiteCount { needed: usize, provided: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mlp,
    ResidualMlp,
    MiniConv,
}

impl Family {
    pub fn key(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::ResidualMlp => "residual-mlp",
            Self::MiniConv => "mini-conv",
        }
    }

    /// ReLU for plain and convolutional stacks, GELU for the residual one.
    pub fn default_activation(self) -> Baseline {
        match self {
            Self::Mlp | Self::MiniConv => Baseline::Relu,
            Self::ResidualMlp => Baseline::Gelu,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "mlp" => Ok(Self::Mlp),
            "residual-mlp" => Ok(Self::ResidualMlp),
            "mini-conv" => Ok(Self::MiniConv),
            other => Err(ModelError::InvalidSpec(format!("unknown family {other:?}"))),
        }
    }
}

/// Channel-major image layout of a mini-conv input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Architecture of a network.
///
/// * `mlp`: `depth` layers `h ← act(W h + b)`, then a linear head.
/// * `residual-mlp`: a linear stem to `width`, `depth` blocks
///   `h ← h + act(W h + b)`, then a linear head.
/// * `mini-conv`: `depth ∈ {1, 2}` valid 3×3-style convolutions with `width`
///   channels, each followed by an activation, then a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub original: Baseline,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

/// Standardization epsilon.
const STANDARDIZE_EPS: f64 = 1e-5;

impl ModelSpec {
    pub fn new(family: Family, input_dim: usize, width: usize, depth: usize, classes: usize) -> Self {
        Self {
            family,
            input_dim,
            width,
            depth,
            classes,
            original: family.default_activation(),
            standardize: false,
            image: None,
            kernel: default_kernel(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.input_dim == 0 || self.width == 0 {
            return bad(format!(
                "zero-width layer (input {}, width {})",
                self.input_dim, self.width
            ));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.depth == 0 {
            return bad("depth 0 leaves no activation site".into());
        }
        if self.family == Family::MiniConv {
            let Some(img) = self.image else {
                return bad("mini-conv needs an image shape".into());
            };
            if img.channels * img.height * img.width != self.input_dim {
                return bad(format!(
                    "image {}×{}×{} does not match input width {}",
                    img.channels, img.height, img.width, self.input_dim
                ));
            }
            if self.depth > 2 {
                return bad(format!("mini-conv supports at most 2 convolutions, got {}", self.depth));
            }
            let shrink = self.depth * (self.kernel.max(1) - 1);
            if self.kernel == 0 || img.height <= shrink || img.width <= shrink {
                return bad(format!(
                    "kernel {} too large for {}×{} images",
                    self.kernel, img.height, img.width
                ));
            }
        } else if self.image.is_some() {
            return bad(format!("{} takes no image shape", self.family.key()));
        }
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        self.depth
    }

    /// Parameter shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (w, c) = (self.width, self.classes);
        let mut out = Vec::new();
        match self.family {
            Family::Mlp => {
                let mut fan_in = self.input_dim;
                for i in 0..self.depth {
                    out.push((format!("layer{i}.weight"), vec![fan_in, w]));
                    out.push((format!("layer{i}.bias"), vec![w]));
                    fan_in = w;
                }
            }
            Family::ResidualMlp => {
                out.push(("stem.weight".into(), vec![self.input_dim, w]));
                out.push(("stem.bias".into(), vec![w]));
                for i in 0..self.depth {
                    out.push((format!("block{i}.weight"), vec![w, w]));
                    out.push((format!("block{i}.bias"), vec![w]));
                }
            }
            Family::MiniConv => {
                let img = self.image.expect("validated");
                let mut ch = img.channels;
                for i in 0..self.depth {
                    out.push((format!("conv{i}.weight"), vec![w, ch, self.kernel, self.kernel]));
                    out.push((format!("conv{i}.bias"), vec![w, 1, 1]));
                    ch = w;
                }
            }
        }
        out.push(("head.weight".into(), vec![self.head_fan_in(), c]));
        out.push(("head.bias".into(), vec![c]));
        out
    }

    fn head_fan_in(&self) -> usize {
        match self.family {
            Family::Mlp | Family::ResidualMlp => self.width,
            Family::MiniConv => {
                let img = self.image.expect("validated");
                let shrink = self.depth * (self.kernel - 1);
                self.width * (img.height - shrink) * (img.width - shrink)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Weight decay applies to weights, never to biases.
    pub decay: bool,
}

/// A network instance: spec plus parameters in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Pre-activation at each site.
    pub site_inputs: Vec<Var>,
    /// Post-activation at each site.
    pub site_outputs: Vec<Var>,
}

const INIT_STREAM: u64 = 0x494e_4954;

/// Builds a model with freshly initialized parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    Model::build(spec, seed)
}

impl Model {
    /// Weights feeding an activation site are He-uniform, the head is
    /// Glorot-uniform, and biases start at zero. Each tensor draws from its
    /// own stream so initialization is a pure function of `(spec, seed)`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        let head = shapes.len() - 2;
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let is_weight = name.ends_with("weight");
                let data = if is_weight {
                    let (fan_in, fan_out) = fans(&shape);
                    let bound = if i == head {
                        (6.0 / (fan_in + fan_out) as f64).sqrt()
                    } else {
                        (6.0 / fan_in as f64).sqrt()
                    };
                    let mut r = rng::stream(seed, &[INIT_STREAM, i as u64]);
                    let n = shape.iter().product();
                    (0..n).map(|_| r.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; shape.iter().product()]
                };
                Ok(Param {
                    name,
                    value: Tensor::new(shape, data)?,
                    decay: is_weight,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    /// Reassembles a model from stored parameters, checking their shapes.
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self, ModelError> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "spec declares {} tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        let params = shapes
            .into_iter()
            .zip(params)
            .map(|((name, shape), value)| {
                if value.shape() != shape.as_slice() {
                    return Err(ModelError::Checkpoint(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        value.shape()
                    )));
                }
                let decay = name.ends_with("weight");
                Ok(Param { name, value, decay })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn site_count(&self) -> usize {
        self.spec.site_count()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Records the network on `tape`. `params` must come from [`Model::bind`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: &Tensor,
        host: &mut dyn SiteHost,
    ) -> Result<Forward, ModelError> {
        let s = &self.spec;
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != s.input_dim {
            return Err(ModelError::InputWidth {
                expected: s.input_dim,
                found: shape.get(1).copied().unwrap_or(0),
            });
        }
        if host.sites().is_some_and(|n| n < s.site_count()) {
            return Err(ModelError::SiteCount {
                needed: s.site_count(),
                provided: host.sites().unwrap_or(0),
            });
        }
        let batch = shape[0];
        let x = tape.constant(features.clone());
        let mut rec = Forward {
            logits: x,
            site_inputs: Vec::with_capacity(s.depth),
            site_outputs: Vec::with_capacity(s.depth),
        };
        let mut site = |tape: &mut Tape, rec: &mut Forward, pre: Var| -> Result<Var, ModelError> {
            let index = rec.site_inputs.len();
            let pre = if s.standardize { standardize(tape, pre)? } else { pre };
            let out = host.apply(tape, index, pre).map_err(|e| ModelError::Site {
                site: index,
                source: Box::new(e),
            })?;
            rec.site_inputs.push(pre);
            rec.site_outputs.push(out);
            Ok(out)
        };
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("bind yields every parameter");
        let h = match s.family {
            Family::Mlp => {
                let mut h = x;
                for _ in 0..s.depth {
                    let pre = dense(tape, h, next(), next(), batch)?;
                    h = site(tape, &mut rec, pre)?;
                }
                h
            }
            Family::ResidualMlp => {
                let mut h = dense(tape, x, next(), next(), batch)?;
                for _ in 0..s.depth {
                    let pre = dense(tape, h, next(), next(), batch)?;
                    let act = site(tape, &mut rec, pre)?;
                    h = tape.add(h, act)?;
                }
                h
            }
            Family::MiniConv => {
                let img = s.image.expect("validated");
                let mut h = tape.reshape(x, &[batch, img.channels, img.height, img.width])?;
                for _ in 0..s.depth {
                    let (k, b) = (next(), next());
                    let conv = tape.conv2d(h, k)?;
                    let out_shape = tape.value(conv).shape().to_vec();
                    let bias = tape.broadcast(b, &out_shape)?;
                    let pre = tape.add(conv, bias)?;
                    h = site(tape, &mut rec, pre)?;
                }
                let flat: usize = tape.value(h).shape()[1..].iter().product();
                tape.reshape(h, &[batch, flat])?
            }
        };
        rec.logits = dense(tape, h, next(), next(), batch)?;
        Ok(rec)
    }

    /// Logits for `features` under `host`, without recording gradients.
    pub fn logits(&self, features: &Tensor, host: &mut dyn SiteHost) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        host.bind(&mut tape, false)?;
        let params = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &params, features, host)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Mean cross-entropy of `batch` and its gradient per parameter; `None`
    /// gradients when `want_grads` is false. The host is bound trainable and
    /// collects its own gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        host: &mut dyn SiteHost,
        want_grads: bool,
    ) -> Result<LossAndGrads, ModelError> {
        let mut tape = Tape::new();
        host.bind(&mut tape, true)?;
        let params = self.bind(&mut tape, want_grads);
        let f = self.forward(&mut tape, &params, &batch.features, host)?;
        let loss_var = tape.softmax_cross_entropy(f.logits, &batch.labels)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            let ranges = f
                .site_inputs
                .iter()
                .map(|&v| {
                    let d = tape.value(v).data();
                    (
                        d.iter().cloned().fold(f64::INFINITY, f64::min),
                        d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    )
                })
                .collect();
            return Err(ModelError::NonFiniteLoss { loss, ranges });
        }
        let grads = tape.backward(loss_var)?;
        host.collect(&tape, &grads)?;
        let w = want_grads.then(|| {
            params
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
                })
                .collect()
        });
        Ok((loss, w))
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        // [out, in, k, k]
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        _ => (shape.iter().product(), shape.iter().product()),
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, batch: usize) -> Result<Var, AutodiffError> {
    let z = tape.matmul(x, w)?;
    let out = tape.value(b).len();
    let bias = tape.broadcast(b, &[batch, out])?;
    tape.add(z, bias)
}

/// Per-sample standardization over all features of a site's input.
fn standardize(tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() == 2 {
        return tape.standardize(x, STANDARDIZE_EPS);
    }
    let flat = tape.reshape(x, &[shape[0], shape[1..].iter().product()])?;
    let s = tape.standardize(flat, STANDARDIZE_EPS)?;
    tape.reshape(s, &shape)
}
