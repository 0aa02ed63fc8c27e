//! The primitive operations that can sit on a cell edge (unary) or vertex
//! (binary), in their fixed enumeration order.

use serde::{Deserialize, Serialize};

use super::scalar;

/// Value and local partials of a unary op at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnaryEval {
    pub value: f64,
    pub dx: f64,
    pub dgamma: f64,
}

/// Value and local partials of a binary op at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryEval {
    pub value: f64,
    pub dx1: f64,
    pub dx2: f64,
    pub dgamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryOpId {
    Identity,
    Negation,
    Square,
    Cube,
    Sqrt,
    Exp,
    Abs,
    Constant,
    Scale,
    Shift,
    Sigmoid,
    Softplus,
    Sinh,
    Tanh,
    Arcsinh,
    Arctan,
    Erf,
    MinZero,
    MaxZero,
    Gelu,
    Silu,
    Elu,
    LeakyRelu,
}

impl UnaryOpId {
    pub const ALL: [UnaryOpId; 23] = [
        Self::Identity,
        Self::Negation,
        Self::Square,
        Self::Cube,
        Self::Sqrt,
        Self::Exp,
        Self::Abs,
        Self::Constant,
        Self::Scale,
        Self::Shift,
        Self::Sigmoid,
        Self::Softplus,
        Self::Sinh,
        Self::Tanh,
        Self::Arcsinh,
        Self::Arctan,
        Self::Erf,
        Self::MinZero,
        Self::MaxZero,
        Self::Gelu,
        Self::Silu,
        Self::Elu,
        Self::LeakyRelu,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn takes_gamma(self) -> bool {
        matches!(self, Self::Constant | Self::Scale | Self::Shift)
    }

    /// Initial γ: 1 for the scale op (identity), 0 otherwise.
    pub fn initial_gamma(self) -> f64 {
        if self == Self::Scale {
            1.0
        } else {
            0.0
        }
    }

    /// Serialized identifier, e.g. `max_zero`.
    pub fn key(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Negation => "negation",
            Self::Square => "square",
            Self::Cube => "cube",
            Self::Sqrt => "sqrt",
            Self::Exp => "exp",
            Self::Abs => "abs",
            Self::Constant => "constant",
            Self::Scale => "scale",
            Self::Shift => "shift",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::Sinh => "sinh",
            Self::Tanh => "tanh",
            Self::Arcsinh => "arcsinh",
            Self::Arctan => "arctan",
            Self::Erf => "erf",
            Self::MinZero => "min_zero",
            Self::MaxZero => "max_zero",
            Self::Gelu => "gelu",
            Self::Silu => "silu",
            Self::Elu => "elu",
            Self::LeakyRelu => "leaky_relu",
        }
    }

    /// Unclamped value and partials. `gamma` is ignored by ops that do not
    /// take one.
    pub fn eval(self, x: f64, gamma: f64) -> UnaryEval {
        let plain = |(value, dx): (f64, f64)| UnaryEval { value, dx, dgamma: 0.0 };
        match self {
            Self::Identity => plain((x, 1.0)),
            Self::Negation => plain((-x, -1.0)),
            Self::Square => plain((x * x, 2.0 * x)),
            Self::Cube => plain((x * x * x, 3.0 * x * x)),
            Self::Sqrt => plain(scalar::signed_sqrt(x)),
            Self::Exp => plain(scalar::exp_guarded(x)),
            Self::Abs => plain(scalar::abs(x)),
            Self::Constant => UnaryEval {
                value: gamma,
                dx: 0.0,
                dgamma: 1.0,
            },
            Self::Scale => UnaryEval {
                value: gamma * x,
                dx: gamma,
                dgamma: x,
            },
            Self::Shift => UnaryEval {
                value: x + gamma,
                dx: 1.0,
                dgamma: 1.0,
            },
            Self::Sigmoid => {
                let s = scalar::sigmoid(x);
                plain((s, s * (1.0 - s)))
            }
            Self::Softplus => plain((scalar::softplus(x), scalar::sigmoid(x))),
            Self::Sinh => plain(scalar::sinh_guarded(x)),
            Self::Tanh => {
                let t = x.tanh();
                plain((t, 1.0 - t * t))
            }
            Self::Arcsinh => plain((x.asinh(), 1.0 / (1.0 + x * x).sqrt())),
            Self::Arctan => plain((x.atan(), 1.0 / (1.0 + x * x))),
            Self::Erf => plain((scalar::erf(x), scalar::erf_deriv(x))),
            Self::MinZero => {
                if x < 0.0 {
                    plain((x, 1.0))
                } else {
                    plain((0.0, 0.0))
                }
            }
            Self::MaxZero => plain(scalar::relu(x)),
            Self::Gelu => plain(scalar::gelu(x)),
            Self::Silu => plain(scalar::silu(x)),
            Self::Elu => plain(scalar::elu(x)),
            Self::LeakyRelu => plain(scalar::leaky_relu(x, scalar::LEAKY_SLOPE)),
        }
    }

    /// [`eval`](Self::eval) followed by the output clamp, if any.
    pub fn eval_clamped(self, x: f64, gamma: f64, clamp: Option<f64>) -> UnaryEval {
        let e = self.eval(x, gamma);
        match clamp {
            Some(limit) if e.value.abs() > limit => UnaryEval {
                value: limit.copysign(e.value),
                dx: 0.0,
                dgamma: 0.0,
            },
            _ => e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryOpId {
    Add,
    Sub,
    Mul,
    Max,
    Min,
    /// `σ(x₁)·x₂`
    Gated,
    /// `σ(γ)·x₁ + (1 − σ(γ))·x₂`
    WeightedAvg,
    Left,
    Right,
}

impl BinaryOpId {
    pub const ALL: [BinaryOpId; 9] = [
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Max,
        Self::Min,
        Self::Gated,
        Self::WeightedAvg,
        Self::Left,
        Self::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn takes_gamma(self) -> bool {
        self == Self::WeightedAvg
    }

    pub fn initial_gamma(self) -> f64 {
        0.0
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Max => "max",
            Self::Min => "min",
            Self::Gated => "gated",
            Self::WeightedAvg => "weighted_avg",
            Self::Left => "left",
            Self::Right => "right",
        }
    }

    /// Unclamped value and partials; ties in max/min route to `x1`.
    pub fn eval(self, x1: f64, x2: f64, gamma: f64) -> BinaryEval {
        let plain = |value, dx1, dx2| BinaryEval {
            value,
            dx1,
            dx2,
            dgamma: 0.0,
        };
        match self {
            Self::Add => plain(x1 + x2, 1.0, 1.0),
            Self::Sub => plain(x1 - x2, 1.0, -1.0),
            Self::Mul => plain(x1 * x2, x2, x1),
            Self::Max => {
                if x1 >= x2 {
                    plain(x1, 1.0, 0.0)
                } else {
                    plain(x2, 0.0, 1.0)
                }
            }
            Self::Min => {
                if x1 <= x2 {
                    plain(x1, 1.0, 0.0)
                } else {
                    plain(x2, 0.0, 1.0)
                }
            }
            Self::Gated => {
                let s = scalar::sigmoid(x1);
                plain(s * x2, s * (1.0 - s) * x2, s)
            }
            Self::WeightedAvg => {
                let s = scalar::sigmoid(gamma);
                BinaryEval {
                    value: s * x1 + (1.0 - s) * x2,
                    dx1: s,
                    dx2: 1.0 - s,
                    dgamma: s * (1.0 - s) * (x1 - x2),
                }
            }
            Self::Left => plain(x1, 1.0, 0.0),
            Self::Right => plain(x2, 0.0, 1.0),
        }
    }

    pub fn eval_clamped(self, x1: f64, x2: f64, gamma: f64, clamp: Option<f64>) -> BinaryEval {
        let e = self.eval(x1, x2, gamma);
        match clamp {
            Some(limit) if e.value.abs() > limit => BinaryEval {
                value: limit.copysign(e.value),
                dx1: 0.0,
                dx2: 0.0,
                dgamma: 0.0,
            },
            _ => e,
        }
    }
}

impl std::fmt::Display for UnaryOpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::fmt::Display for BinaryOpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}
