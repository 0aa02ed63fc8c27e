use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
    },
    /// Adam with weight decay applied directly to the parameters instead of
    /// being folded into the gradient.
    #[serde(rename = "adamw")]
    AdamW {
        beta1: f64,
        beta2: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            weight_decay,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam { beta1, beta2 },
            lr,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }

    pub fn adamw(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW { beta1, beta2 },
            lr,
            weight_decay,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("parameter {param}: value has {value} elements, gradient {grad}, state {state}")]
    ShapeMismatch {
        param: String,
        value: usize,
        grad: usize,
        state: usize,
    },
}

/// One parameter handed to [`OptimizerState::step`].
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer configuration plus per-parameter moment buffers.
///
/// Slots are matched to parameters by position, so callers must pass the
/// same parameter list in the same order on every step.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    slots: Vec<Option<Slot>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops element `index` from the moment buffers of slot `slot`.
    pub fn remove_element(&mut self, slot: usize, index: usize) {
        if let Some(Some(s)) = self.slots.get_mut(slot) {
            if index < s.first.len() {
                s.first.remove(index);
            }
            if index < s.second.len() {
                s.second.remove(index);
            }
        }
    }

    /// Applies one update. Nothing is modified if any gradient is
    /// non-finite or misaligned.
    pub fn step(&mut self, params: &mut [ParamRef<'_>]) -> Result<(), OptimError> {
        for (i, p) in params.iter().enumerate() {
            let state = self
                .slots
                .get(i)
                .and_then(|s| s.as_ref())
                .map_or(p.value.len(), |s| s.first.len());
            if p.grad.len() != p.value.len() || state != p.value.len() {
                return Err(OptimError::ShapeMismatch {
                    param: p.name.to_string(),
                    value: p.value.len(),
                    grad: p.grad.len(),
                    state,
                });
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    param: p.name.to_string(),
                });
            }
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        self.step += 1;
        let OptimizerConfig {
            kind,
            lr,
            weight_decay,
            eps,
        } = self.config;
        let t = self.step as i32;
        for (p, slot) in params.iter_mut().zip(self.slots.iter_mut()) {
            let n = p.value.len();
            let slot = slot.get_or_insert_with(|| Slot {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let wd = if p.decay { weight_decay } else { 0.0 };
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &g), buf) in p.value.iter_mut().zip(p.grad).zip(&mut slot.first) {
                        let g = g + wd * *w;
                        *buf = momentum * *buf + g;
                        *w -= lr * *buf;
                    }
                }
                OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::AdamW { beta1, beta2 } => {
                    let decoupled = matches!(kind, OptimizerKind::AdamW { .. });
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let moments = slot.first.iter_mut().zip(slot.second.iter_mut());
                    for ((w, &g), (m, v)) in p.value.iter_mut().zip(p.grad).zip(moments) {
                        let g = if decoupled {
                            *w -= lr * wd * *w;
                            g
                        } else {
                            g + wd * *w
                        };
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
