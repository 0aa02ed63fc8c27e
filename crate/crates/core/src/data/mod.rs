//! Datasets: synthesis, CSV and IDX ingestion, seeded splitting and
//! batching.

mod csv_io;
mod idx;
mod synth;

#[cfg(test)]
mod tests;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;
use crate::Tensor;

pub use csv_io::{load_csv, save_csv};
pub use idx::load_idx;
pub use synth::{gen_blobs, gen_spirals, GeneratorSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, byte {byte}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        byte: u64,
        message: String,
    },
    #[error("{path}: line {line}, byte {byte}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        byte: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}, byte {byte}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        line: u64,
        byte: u64,
        label: String,
        classes: usize,
    },
    #[error("{path}: no \"label\" column in header")]
    MissingLabelColumn { path: PathBuf },
    #[error("{path}: byte 0: magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    IdxTruncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("{images} holds {image_count} images but {labels} holds {label_count} labels")]
    IdxCountMismatch {
        images: PathBuf,
        labels: PathBuf,
        image_count: usize,
        label_count: usize,
    },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("split of {n} samples at fraction {fraction} leaves an empty side")]
    EmptySplit { n: usize, fraction: f64 },
    #[error("batch size must be positive")]
    ZeroBatch,
}

/// How a dataset came to be.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataProvenance {
    Generated {
        spec: GeneratorSpec,
    },
    File {
        path: String,
        sha256: String,
    },
    Subset {
        parent: Box<DataProvenance>,
        part: String,
        seed: u64,
    },
}

/// `n × d` features in row-major order with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    provenance: DataProvenance,
}

/// One minibatch, features shaped `[b, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        provenance: DataProvenance,
    ) -> Result<Self, DataError> {
        let n = labels.len();
        if n == 0 || dim == 0 {
            return Err(DataError::Empty);
        }
        if features.len() != n * dim {
            return Err(DataError::InvalidSpec(format!(
                "{} feature values for {n} rows of width {dim}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "non-finite feature at row {}, column {}",
                i / dim,
                i % dim
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidSpec(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> &DataProvenance {
        &self.provenance
    }

    /// SHA-256 over dimensions, little-endian feature bits and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rows `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Batch {
            indices: indices.to_vec(),
            features: Tensor::new(vec![indices.len(), self.dim], data).expect("indices are non-empty"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn subset(&self, indices: &[usize], part: &str, seed: u64) -> Self {
        let batch = self.gather(indices);
        Self {
            features: batch.features.into_data(),
            labels: batch.labels,
            dim: self.dim,
            classes: self.classes,
            provenance: DataProvenance::Subset {
                parent: Box::new(self.provenance.clone()),
                part: part.to_string(),
                seed,
            },
        }
    }

    /// Seeded shuffle into `(train, val)` with `round(n·fraction)` training
    /// rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DataError::InvalidFraction(fraction));
        }
        let n = self.len();
        let n_train = (n as f64 * fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(DataError::EmptySplit { n, fraction });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[SPLIT_STREAM]));
        Ok((
            self.subset(&order[..n_train], "train", seed),
            self.subset(&order[n_train..], "val", seed),
        ))
    }

    /// Index lists of a seeded permutation cut into batches of `size`; the
    /// last batch may be short. A pure function of `(seed, epoch)`.
    pub fn batch_indices(&self, size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
        if size == 0 {
            return Err(DataError::ZeroBatch);
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[BATCH_STREAM, epoch]));
        Ok(order.chunks(size).map(<[usize]>::to_vec).collect())
    }

    pub fn batches(&self, size: usize, seed: u64, epoch: u64) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
        Ok(self
            .batch_indices(size, seed, epoch)?
            .into_iter()
            .map(move |idx| self.gather(&idx)))
    }

    /// The whole dataset as one batch, in stored order.
    pub fn all(&self) -> Batch {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }
}

const SPLIT_STREAM: u64 = 0x0053_504c_4954;
const BATCH_STREAM: u64 = 0x0042_4154_4348;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
