use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, DataProvenance, Dataset};
use crate::rng;

/// Largest spiral angle: one and a half turns.
const SPIRAL_TURNS: f64 = 3.0 * PI;

/// Radius of the circle blob centers sit on.
const BLOB_RADIUS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Spirals { n: usize, noise: f64, seed: u64 },
    Blobs { n: usize, k: usize, spread: f64, seed: u64 },
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Dataset, DataError> {
        match *self {
            Self::Spirals { n, noise, seed } => gen_spirals(n, noise, seed),
            Self::Blobs { n, k, spread, seed } => gen_blobs(n, k, spread, seed),
        }
    }
}

/// Two interleaved arms `r = θ`, the second rotated by π, with Gaussian
/// jitter of standard deviation `noise` per coordinate. Sample `i` belongs
/// to arm `i mod 2`; `θ = 3π·√u` spreads points evenly along the arc.
pub fn gen_spirals(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::InvalidSpec(format!("spirals need n ≥ 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::InvalidSpec(format!("noise must be ≥ 0, got {noise}")));
    }
    let mut rng = rng::stream(seed, &[0x5350_4952]);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let arm = i % 2;
        let theta = SPIRAL_TURNS * rng.random::<f64>().sqrt();
        let phase = if arm == 0 { 0.0 } else { PI };
        let (s, c) = (theta + phase).sin_cos();
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        features.push(theta * c + noise * jx);
        features.push(theta * s + noise * jy);
        labels.push(arm);
    }
    Dataset::new(
        features,
        labels,
        2,
        2,
        DataProvenance::Generated {
            spec: GeneratorSpec::Spirals { n, noise, seed },
        },
    )
}

/// `k` isotropic Gaussian blobs with centers evenly spaced on a circle;
/// sample `i` belongs to blob `i mod k`.
pub fn gen_blobs(n: usize, k: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if k < 2 || n < k {
        return Err(DataError::InvalidSpec(format!(
            "blobs need n ≥ k ≥ 2, got n={n}, k={k}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidSpec(format!("spread must be ≥ 0, got {spread}")));
    }
    let mut rng = rng::stream(seed, &[0x424c_4f42]);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let angle = 2.0 * PI * class as f64 / k as f64;
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        features.push(BLOB_RADIUS * angle.cos() + spread * jx);
        features.push(BLOB_RADIUS * angle.sin() + spread * jy);
        labels.push(class);
    }
    Dataset::new(
        features,
        labels,
        2,
        k,
        DataProvenance::Generated {
            spec: GeneratorSpec::Blobs { n, k, spread, seed },
        },
    )
}
