//! Dirichlet sampling by normalized Gamma variates, and the pathwise
//! gradient of a sample with respect to its concentrations.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use super::{CellDistribution, CellError, Location};

/// Step of the central difference in the shape argument of the regularized
/// incomplete gamma function.
const SHAPE_STEP: f64 = 1e-5;

/// Redraws allowed when a Gamma variate underflows to zero.
const MAX_REDRAWS: usize = 1000;

/// One simplex draw at one location: the Gamma variates `z` and the weights
/// `z / Σz`. Single-op locations carry `z = [1]`, `weights = [1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexDraw {
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SimplexDraw {
    /// One Dirichlet(ρ) draw.
    pub fn draw<R: Rng + ?Sized>(rho: &[f64], rng: &mut R) -> Self {
        if rho.len() == 1 {
            return Self {
                z: vec![1.0],
                weights: vec![1.0],
            };
        }
        let z: Vec<f64> = rho.iter().map(|&r| gamma_variate(r, rng)).collect();
        let total: f64 = z.iter().sum();
        let weights = z.iter().map(|zi| zi / total).collect();
        Self { z, weights }
    }

    /// A fixed draw with the given weights (`z` set to the weights).
    pub fn fixed(weights: Vec<f64>) -> Self {
        Self {
            z: weights.clone(),
            weights,
        }
    }
}

fn gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let dist = Gamma::new(shape, 1.0).expect("concentrations are positive and finite");
    for _ in 0..MAX_REDRAWS {
        let z = dist.sample(rng);
        if z > 0.0 {
            return z;
        }
    }
    f64::MIN_POSITIVE
}

/// One draw per location, for one activation site and one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSample {
    pub draws: Vec<SimplexDraw>,
}

impl CellSample {
    pub fn draw(&self, location: Location) -> &SimplexDraw {
        &self.draws[location.index()]
    }

    /// A sample that puts all weight on the argmax-ρ op at every location.
    pub fn one_hot(dist: &CellDistribution) -> Self {
        Self {
            draws: Location::ALL
                .iter()
                .map(|&l| {
                    let s = dist.location(l);
                    let mut w = vec![0.0; s.len()];
                    w[s.argmax()] = 1.0;
                    SimplexDraw::fixed(w)
                })
                .collect(),
        }
    }

    /// Per-location gradient with respect to ρ given `upstream = ∂L/∂weights`.
    pub fn rho_grad(&self, dist: &CellDistribution, upstream: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, CellError> {
        Location::ALL
            .iter()
            .map(|&l| {
                let rho = dist.rho(l);
                let draw = self.draw(l);
                let g = &upstream[l.index()];
                if g.len() != rho.len() || draw.z.len() != rho.len() {
                    return Err(CellError::Arity {
                        location: l,
                        expected: rho.len(),
                        found: g.len().min(draw.z.len()),
                    });
                }
                Ok(dirichlet_backward(draw, &rho, g))
            })
            .collect()
    }
}

/// Draws independent normalized Gamma(ρᵢ, 1) variates at every location.
pub fn sample_cell<R: Rng + ?Sized>(dist: &CellDistribution, rng: &mut R) -> CellSample {
    CellSample {
        draws: Location::ALL
            .iter()
            .map(|&l| SimplexDraw::draw(&dist.rho(l), rng))
            .collect(),
    }
}

/// `∂F(z; ρ)/∂ρ` for the Gamma(ρ, 1) CDF, by central difference. Uses the
/// upper tail where the lower one would lose precision.
fn cdf_shape_deriv(z: f64, rho: f64) -> f64 {
    let h = SHAPE_STEP.min(rho / 2.0);
    if z > rho && z >= 1.0 {
        -(gamma_ur(rho + h, z) - gamma_ur(rho - h, z)) / (2.0 * h)
    } else {
        (gamma_lr(rho + h, z) - gamma_lr(rho - h, z)) / (2.0 * h)
    }
}

/// `dz/dρ = −(∂F/∂ρ) / f(z; ρ)` for one Gamma(ρ, 1) variate.
pub(crate) fn gamma_reparam_deriv(z: f64, rho: f64) -> f64 {
    let log_pdf = (rho - 1.0) * z.ln() - z - ln_gamma(rho);
    let pdf = log_pdf.exp();
    if !(pdf.is_finite() && pdf > 0.0) {
        return 0.0;
    }
    let d = -cdf_shape_deriv(z, rho) / pdf;
    if d.is_finite() {
        d
    } else {
        0.0
    }
}

/// Pathwise gradient of a loss with respect to the concentrations of one
/// location, given `upstream = ∂L/∂weights` for that draw.
pub fn dirichlet_backward(draw: &SimplexDraw, rho: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = rho.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let total: f64 = draw.z.iter().sum();
    let mean_g: f64 = upstream.iter().zip(&draw.weights).map(|(g, w)| g * w).sum();
    (0..n)
        .map(|j| {
            let dl_dz = (upstream[j] - mean_g) / total;
            if dl_dz == 0.0 {
                0.0
            } else {
                dl_dz * gamma_reparam_deriv(draw.z[j], rho[j])
            }
        })
        .collect()
}
