//! Scalar special functions shared by the op table, the baselines and the
//! closed-form activations.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Inputs to `exp` and `sinh` are clamped to this band before evaluation.
pub const EXP_INPUT_LIMIT: f64 = 30.0;

/// Default negative slope of LeakyReLU.
pub const LEAKY_SLOPE: f64 = 1e-2;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erf_deriv(x: f64) -> f64 {
    2.0 / PI.sqrt() * (-x * x).exp()
}

/// Standard normal CDF, via `erfc` so the left tail keeps full relative
/// precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> (f64, f64) {
    let cdf = normal_cdf(x);
    (x * cdf, cdf + x * normal_pdf(x))
}

pub fn silu(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    (x * s, s * (1.0 + x * (1.0 - s)))
}

pub fn relu(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (0.0, 0.0)
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (slope * x, slope)
    }
}

/// ELU with α = 1.
pub fn elu(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (x.exp_m1(), x.exp())
    }
}

/// `exp` with its input clamped to `±EXP_INPUT_LIMIT`.
pub fn exp_guarded(x: f64) -> (f64, f64) {
    let xc = x.clamp(-EXP_INPUT_LIMIT, EXP_INPUT_LIMIT);
    let e = xc.exp();
    (e, if xc == x { e } else { 0.0 })
}

pub fn sinh_guarded(x: f64) -> (f64, f64) {
    let xc = x.clamp(-EXP_INPUT_LIMIT, EXP_INPUT_LIMIT);
    (xc.sinh(), if xc == x { xc.cosh() } else { 0.0 })
}

/// Signed square root `sign(x)·√|x|`; derivative taken as 0 at the origin.
pub fn signed_sqrt(x: f64) -> (f64, f64) {
    if x == 0.0 {
        return (0.0, 0.0);
    }
    let r = x.abs().sqrt();
    (x.signum() * r, 0.5 / r)
}

/// Absolute value with subgradient 0 at the origin.
pub fn abs(x: f64) -> (f64, f64) {
    let d = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    (x.abs(), d)
}
