//! Closed-form evaluators for the fifteen published searched activations.
//! Coefficients are transcribed as printed; none are renormalized.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{scalar, OpError};

/// Forward-mode dual number `v + d·ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn var(x: f64) -> Self {
        Self { v: x, d: 1.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self { v: c, d: 0.0 }
    }

    /// Chain rule through a scalar function returning `(value, derivative)`.
    pub fn apply(self, f: impl Fn(f64) -> (f64, f64)) -> Self {
        let (v, df) = f(self.v);
        Self { v, d: df * self.d }
    }

    pub fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        Self {
            v: self.v.powi(n),
            d: f64::from(n) * self.v.powi(n - 1) * self.d,
        }
    }

    pub fn relu(self) -> Self {
        self.apply(scalar::relu)
    }

    pub fn leaky_relu(self) -> Self {
        self.apply(|x| scalar::leaky_relu(x, scalar::LEAKY_SLOPE))
    }

    pub fn gelu(self) -> Self {
        self.apply(scalar::gelu)
    }

    pub fn silu(self) -> Self {
        self.apply(scalar::silu)
    }

    pub fn sinh(self) -> Self {
        self.apply(|x| (x.sinh(), x.cosh()))
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Add<f64> for Dual {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        Self {
            v: self.v + c,
            d: self.d,
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Mul<Dual> for f64 {
    type Output = Dual;
    fn mul(self, x: Dual) -> Dual {
        Dual {
            v: self * x.v,
            d: self * x.d,
        }
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v, d: -self.d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "RN")]
    Rn,
    #[serde(rename = "ViT")]
    Vit,
    #[serde(rename = "GPT")]
    Gpt,
}

impl Family {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Rn => "RN",
            Self::Vit => "ViT",
            Self::Gpt => "GPT",
        }
    }
}

/// One of `F_RN^1..5`, `F_ViT^1..5`, `F_GPT^1..5`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FormulaId {
    family: Family,
    index: u8,
}

impl FormulaId {
    pub fn new(family: Family, index: u8) -> Option<Self> {
        (1..=5).contains(&index).then_some(Self { family, index })
    }

    pub fn all() -> impl Iterator<Item = FormulaId> {
        [Family::Rn, Family::Vit, Family::Gpt]
            .into_iter()
            .flat_map(|family| (1..=5).map(move |index| FormulaId { family, index }))
    }

    pub fn family(self) -> Family {
        self.family
    }

    pub fn index(self) -> u8 {
        self.index
    }

    pub fn eval_dual(self, x: Dual) -> Dual {
        use Family::*;
        match (self.family, self.index) {
            (Rn, 1) => 0.4739 * x.leaky_relu().leaky_relu() + 0.5261 * x.gelu(),
            (Rn, 2) => 0.5163 * (0.4945 * x.relu() + 0.5055 * x.gelu()).leaky_relu() + 0.4837 * x.gelu(),
            (Rn, 3) => 0.4865 * (0.4873 * x.relu() + 0.5127 * x.gelu()).gelu() + 0.5135 * x.gelu(),
            (Rn, 4) => 0.4756 * x.relu() + 0.5244 * x.gelu(),
            (Rn, 5) => 0.4591 * (0.5267 * x.leaky_relu() + 0.4733 * x.gelu()).leaky_relu() + 0.5409 * x.gelu(),
            (Vit, 1) => 0.6601 * (x.silu() * x.gelu()).gelu() + 0.3399 * x.powi(2),
            (Vit, 2) => 0.7322 * (0.2822 * x.powi(2) + 0.7178 * x.gelu()).silu() + 0.2678 * x.powi(2),
            (Vit, 3) => 0.7319 * (x.silu() * x.gelu()).gelu() + 0.2681 * x.powi(2),
            (Vit, 4) => 0.6778 * (x.silu() * x.gelu()).gelu() + 0.3222 * x.powi(2),
            (Vit, 5) => 0.3139 * x.powi(2) + 0.5431 * x.gelu(),
            (Gpt, 1) => 0.4953 * (x.leaky_relu() * x.gelu()) + 0.5047 * x.relu(),
            (Gpt, 2) => (0.4689 * x.gelu() + 0.5311) * x.relu(),
            (Gpt, 3) => (0.4662 * x.sinh() + 0.5338) * x.gelu(),
            (Gpt, 4) => 0.4781 * x.relu().powi(2) + 0.5219 * x.relu(),
            (Gpt, 5) => 0.4828 * x.relu().powi(2) + 0.5172 * x.relu(),
            _ => unreachable!("index validated at construction"),
        }
    }

    /// `(f(x), f'(x))`, unclamped.
    pub fn eval_with_grad(self, x: f64) -> (f64, f64) {
        let y = self.eval_dual(Dual::var(x));
        (y.v, y.d)
    }

    pub fn eval(self, x: f64) -> f64 {
        self.eval_dual(Dual::constant(x)).v
    }
}

impl fmt::Display for FormulaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F_{}^{}", self.family.tag(), self.index)
    }
}

impl FromStr for FormulaId {
    type Err = OpError;

    /// Accepts `F_RN^4`, `F_RN4`, `rn4`, `RN^4` and similar, any case.
    fn from_str(s: &str) -> Result<Self, OpError> {
        let err = || OpError::UnknownFormula(s.to_string());
        let mut key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '^' | '-' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        if key.starts_with('f') && key.len() > 3 {
            key.remove(0);
        }
        let split = key.find(|c: char| c.is_ascii_digit()).ok_or_else(err)?;
        let (tag, digits) = key.split_at(split);
        let family = match tag {
            "rn" => Family::Rn,
            "vit" => Family::Vit,
            "gpt" => Family::Gpt,
            _ => return Err(err()),
        };
        let index: u8 = digits.parse().map_err(|_| err())?;
        Self::new(family, index).ok_or_else(err)
    }
}

impl Serialize for FormulaId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FormulaId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn eval_discovered(id: FormulaId, x: f64) -> f64 {
    id.eval(x)
}
