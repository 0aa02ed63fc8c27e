use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{scalar, OpError};

/// Hand-designed activations used as the original activation and as
/// retraining baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Relu,
    Gelu,
    Silu,
    Elu,
    LeakyRelu,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [Self::Relu, Self::Gelu, Self::Silu, Self::Elu, Self::LeakyRelu];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "ReLU",
            Self::Gelu => "GELU",
            Self::Silu => "SiLU",
            Self::Elu => "ELU",
            Self::LeakyRelu => "LeakyReLU",
        }
    }

    /// `(f(x), f'(x))`.
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Self::Relu => scalar::relu(x),
            Self::Gelu => scalar::gelu(x),
            Self::Silu => scalar::silu(x),
            Self::Elu => scalar::elu(x),
            Self::LeakyRelu => scalar::leaky_relu(x, scalar::LEAKY_SLOPE),
        }
    }
}

impl FromStr for Baseline {
    type Err = OpError;

    /// Case-insensitive; `-` and `_` are ignored.
    fn from_str(s: &str) -> Result<Self, OpError> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "silu" | "swish" => Ok(Self::Silu),
            "elu" => Ok(Self::Elu),
            "leakyrelu" | "lrelu" => Ok(Self::LeakyRelu),
            _ => Err(OpError::UnknownBaseline(s.to_string())),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn eval_baseline(name: &str, x: f64) -> Result<f64, OpError> {
    Ok(name.parse::<Baseline>()?.eval(x).0)
}
