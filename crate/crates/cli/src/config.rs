//! Flat `key = value` run configuration with dotted sections.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; keys
//! not listed in [`RunConfig::canonical`] are rejected, as are duplicates.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use grafs_core::autodiff::{OptimizerConfig, OptimizerKind};
use grafs_core::data::{gen_blobs, gen_spirals, load_csv, load_idx, sha256_hex, Dataset};
use grafs_core::model::{Family, ImageShape, ModelSpec, TrainConfig};
use grafs_core::ops::Baseline;
use grafs_core::rng::derive_seed;
use grafs_core::search::{Anchor, SearchConfig};
use thiserror::Error;

/// Keys that belong to one data source or another.
const SOURCE_KEYS: [&str; 8] = [
    "data.n",
    "data.noise",
    "data.k",
    "data.spread",
    "data.path",
    "data.classes",
    "data.images",
    "data.labels",
];

/// Sub-stream for the pool/test split.
const TEST_SPLIT_STREAM: u64 = 0x54455354;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key {key:?} (first set on line {first})")]
    Duplicate { key: String, line: usize, first: usize },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    Value {
        key: String,
        line: usize,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Spirals { n: usize, noise: f64 },
    Blobs { n: usize, k: usize, spread: f64 },
    Csv { path: PathBuf, classes: Option<usize> },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: DataSource,
    pub seed: u64,
    /// Share of the data held out for retraining evaluation.
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub family: Family,
    pub width: usize,
    pub depth: usize,
    /// Activation used during warm-start and by the unsearched baseline.
    pub activation: Baseline,
    pub standardize: bool,
    pub image: Option<ImageShape>,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

/// Everything a command needs; `search.seed` is replaced per run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub model: ModelSettings,
    pub data: DataSettings,
    pub retrain: RetrainSettings,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let family = Family::ResidualMlp;
        Self {
            search: SearchConfig::default(),
            model: ModelSettings {
                family,
                width: 32,
                depth: 3,
                activation: family.default_activation(),
                standardize: false,
                image: None,
                kernel: 3,
            },
            data: DataSettings {
                source: DataSource::Spirals { n: 2000, noise: 0.2 },
                seed: 0,
                test_fraction: 0.2,
            },
            retrain: RetrainSettings {
                epochs: 20,
                batch_size: 32,
                optimizer: OptimizerConfig::sgd(0.01, 0.9, 1e-4),
            },
            seeds: vec![0],
            out: PathBuf::from("runs"),
        }
    }
}

/// Raw entries with the line each came from; keys are consumed as they
/// are read so leftovers are exactly the unknown ones.
struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if let Some((first, _)) = map.get(k) {
                return Err(ConfigError::Duplicate {
                    key: k.to_string(),
                    line,
                    first: *first,
                });
            }
            map.insert(k.to_string(), (line, v.to_string()));
        }
        Ok(Self(map))
    }

    fn has(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        let Some((line, value)) = self.0.remove(key) else {
            return Ok(None);
        };
        parse(&value).map(Some).map_err(|reason| ConfigError::Value {
            key: key.to_string(),
            line,
            value,
            reason,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.take_with(key, |v| v.parse::<T>().map_err(|e| e.to_string()))
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails if any of `keys` is present; used for keys that do not apply
    /// to the chosen variant.
    fn forbid(&self, keys: &[&str], why: &str) -> Result<(), ConfigError> {
        match keys.iter().find(|k| self.has(k)) {
            Some(k) => Err(ConfigError::Invalid(format!("{k} {why}"))),
            None => Ok(()),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.0.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(ConfigError::UnknownKey { key, line }),
            None => Ok(()),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_image(v: &str) -> Result<ImageShape, String> {
    let dims: Result<Vec<usize>, _> = v.split(['x', '×']).map(|d| d.trim().parse::<usize>()).collect();
    match dims.map_err(|e| e.to_string())?.as_slice() {
        &[channels, height, width] => Ok(ImageShape {
            channels,
            height,
            width,
        }),
        _ => Err("expected CxHxW, e.g. 1x28x28".into()),
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|e| format!("{e}"))?,
            b.trim().parse().map_err(|e| format!("{e}"))?,
        );
        return Ok((a..b).collect());
    }
    v.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn parse_baseline(v: &str) -> Result<Baseline, String> {
    v.parse::<Baseline>().map_err(|e| e.to_string())
}

fn parse_family(v: &str) -> Result<Family, String> {
    v.parse::<Family>().map_err(|e| e.to_string())
}

/// Reads the optimizer group under `prefix`; keys of other optimizer kinds
/// are errors.
fn optimizer(e: &mut Entries, prefix: &str, default: OptimizerConfig) -> Result<OptimizerConfig, ConfigError> {
    let key = |s: &str| format!("{prefix}.{s}");
    let default_kind = kind_name(&default.kind);
    let kind: String = e.or(&key("optimizer"), default_kind.to_string())?;
    let same = kind == default_kind;
    let lr = e.or(&key("lr"), default.lr)?;
    let (beta1, beta2) = match default.kind {
        OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::AdamW { beta1, beta2 } if same => (beta1, beta2),
        _ => (0.9, 0.999),
    };
    let cfg = match kind.as_str() {
        "sgd" => {
            e.forbid(&[&key("beta1"), &key("beta2")], "applies only to adam and adamw")?;
            let momentum = match default.kind {
                OptimizerKind::Sgd { momentum } => momentum,
                _ => 0.9,
            };
            let wd = if same { default.weight_decay } else { 0.0 };
            OptimizerConfig::sgd(lr, e.or(&key("momentum"), momentum)?, e.or(&key("weight_decay"), wd)?)
        }
        "adam" | "adamw" => {
            e.forbid(&[&key("momentum")], "applies only to sgd")?;
            let (b1, b2) = (e.or(&key("beta1"), beta1)?, e.or(&key("beta2"), beta2)?);
            let wd_default = if same {
                default.weight_decay
            } else if kind == "adamw" {
                0.01
            } else {
                0.0
            };
            let wd = e.or(&key("weight_decay"), wd_default)?;
            if kind == "adam" {
                OptimizerConfig {
                    weight_decay: wd,
                    ..OptimizerConfig::adam(lr, b1, b2)
                }
            } else {
                OptimizerConfig::adamw(lr, b1, b2, wd)
            }
        }
        other => {
            return Err(ConfigError::Invalid(format!(
                "{} must be sgd, adam or adamw, got {other:?}",
                key("optimizer")
            )))
        }
    };
    Ok(cfg)
}

fn kind_name(kind: &OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd { .. } => "sgd",
        OptimizerKind::Adam { .. } => "adam",
        OptimizerKind::AdamW { .. } => "adamw",
    }
}

fn write_optimizer(out: &mut Vec<(String, String)>, prefix: &str, o: &OptimizerConfig) {
    let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    put("optimizer", kind_name(&o.kind).into());
    put("lr", o.lr.to_string());
    match o.kind {
        OptimizerKind::Sgd { momentum } => put("momentum", momentum.to_string()),
        OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::AdamW { beta1, beta2 } => {
            put("beta1", beta1.to_string());
            put("beta2", beta2.to_string());
        }
    }
    put("weight_decay", o.weight_decay.to_string());
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let d = RunConfig::default();
        let mut e = Entries::parse(text)?;

        let s = &d.search;
        let anchor_kind: String = e.or("search.anchor", "penalty".to_string())?;
        let anchor_weight = e.or("search.anchor_weight", 1e-3)?;
        let anchor = match anchor_kind.as_str() {
            "penalty" => Anchor::Penalty { lambda: anchor_weight },
            "weight-decay" | "weight_decay" => Anchor::WeightDecay { decay: anchor_weight },
            other => {
                return Err(ConfigError::Invalid(format!(
                    "search.anchor must be penalty or weight-decay, got {other:?}"
                )))
            }
        };
        let search = SearchConfig {
            total_rounds: e.or("search.total_rounds", s.total_rounds)?,
            warmstart_rounds: e.or("search.warmstart_rounds", s.warmstart_rounds)?,
            split: e.or("search.split", s.split)?,
            batch_size: e.or("search.batch_size", s.batch_size)?,
            accumulation: e.or("search.accumulation", s.accumulation)?,
            inner: optimizer(&mut e, "search.inner", s.inner)?,
            outer: optimizer(&mut e, "search.outer", s.outer)?,
            anchor,
            clamp: e.or("search.clamp", s.clamp)?,
            seed: 0,
            shrink: e.take_with("search.shrink", parse_bool)?.unwrap_or(s.shrink),
        };

        let family = e.take_with("model.family", parse_family)?.unwrap_or(d.model.family);
        let model = ModelSettings {
            family,
            width: e.or("model.width", d.model.width)?,
            depth: e.or("model.depth", d.model.depth)?,
            activation: e
                .take_with("model.activation", parse_baseline)?
                .unwrap_or(family.default_activation()),
            standardize: e.take_with("model.standardize", parse_bool)?.unwrap_or(false),
            image: e.take_with("model.image", parse_image)?,
            kernel: e.or("model.kernel", d.model.kernel)?,
        };

        let generator: String = e.or("data.generator", "spirals".to_string())?;
        let own: &[&str] = match generator.as_str() {
            "spirals" => &["data.n", "data.noise"],
            "blobs" => &["data.n", "data.k", "data.spread"],
            "csv" => &["data.path", "data.classes"],
            "idx" => &["data.images", "data.labels"],
            _ => &[],
        };
        let foreign: Vec<&str> = SOURCE_KEYS.iter().copied().filter(|k| !own.contains(k)).collect();
        e.forbid(&foreign, &format!("does not apply to data.generator = {generator}"))?;
        let source = match generator.as_str() {
            "spirals" => DataSource::Spirals {
                n: e.or("data.n", 2000)?,
                noise: e.or("data.noise", 0.2)?,
            },
            "blobs" => DataSource::Blobs {
                n: e.or("data.n", 600)?,
                k: e.or("data.k", 3)?,
                spread: e.or("data.spread", 0.5)?,
            },
            "csv" => {
                let path: Option<PathBuf> = e.take("data.path")?;
                DataSource::Csv {
                    path: path.ok_or_else(|| ConfigError::Invalid("data.generator = csv needs data.path".into()))?,
                    classes: e.take("data.classes")?,
                }
            }
            "idx" => {
                let images: Option<PathBuf> = e.take("data.images")?;
                let labels: Option<PathBuf> = e.take("data.labels")?;
                match (images, labels) {
                    (Some(images), Some(labels)) => DataSource::Idx { images, labels },
                    _ => {
                        return Err(ConfigError::Invalid(
                            "data.generator = idx needs data.images and data.labels".into(),
                        ))
                    }
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "data.generator must be spirals, blobs, csv or idx, got {other:?}"
                )))
            }
        };
        let data = DataSettings {
            source,
            seed: e.or("data.seed", 0)?,
            test_fraction: e.or("data.test_fraction", d.data.test_fraction)?,
        };

        let retrain = RetrainSettings {
            epochs: e.or("retrain.epochs", d.retrain.epochs)?,
            batch_size: e.or("retrain.batch_size", d.retrain.batch_size)?,
            optimizer: optimizer(&mut e, "retrain", d.retrain.optimizer)?,
        };

        let seeds = e.take_with("run.seeds", parse_seeds)?.unwrap_or(d.seeds);
        let out = e.or("run.out", d.out)?;
        e.finish()?;

        let cfg = Self {
            search,
            model,
            data,
            retrain,
            seeds,
            out,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        text.parse()
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.search
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("run.seeds is empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("run.seeds repeats a seed".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!(
                "data.test_fraction {} must lie strictly between 0 and 1",
                self.data.test_fraction
            ));
        }
        if self.retrain.epochs == 0 || self.retrain.batch_size == 0 {
            return bad("retrain.epochs and retrain.batch_size must be positive".into());
        }
        if !(self.retrain.optimizer.lr > 0.0 && self.retrain.optimizer.lr.is_finite()) {
            return bad(format!("retrain.lr {} must be positive", self.retrain.optimizer.lr));
        }
        // Shape checks with the data-dependent widths filled in.
        let input = self.model.image.map_or(2, |i| i.channels * i.height * i.width);
        self.model_spec(input, 2)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let s = &self.search;
        put("search.total_rounds", s.total_rounds.to_string());
        put("search.warmstart_rounds", s.warmstart_rounds.to_string());
        put("search.split", s.split.to_string());
        put("search.batch_size", s.batch_size.to_string());
        put("search.accumulation", s.accumulation.to_string());
        let (anchor, weight) = match s.anchor {
            Anchor::Penalty { lambda } => ("penalty", lambda),
            Anchor::WeightDecay { decay } => ("weight-decay", decay),
        };
        put("search.anchor", anchor.into());
        put("search.anchor_weight", weight.to_string());
        put("search.clamp", s.clamp.to_string());
        put("search.shrink", s.shrink.to_string());
        let m = &self.model;
        put("model.family", m.family.key().into());
        put("model.width", m.width.to_string());
        put("model.depth", m.depth.to_string());
        put("model.activation", m.activation.to_string());
        put("model.standardize", m.standardize.to_string());
        if let Some(i) = m.image {
            put("model.image", format!("{}x{}x{}", i.channels, i.height, i.width));
        }
        put("model.kernel", m.kernel.to_string());
        match &self.data.source {
            DataSource::Spirals { n, noise } => {
                put("data.generator", "spirals".into());
                put("data.n", n.to_string());
                put("data.noise", noise.to_string());
            }
            DataSource::Blobs { n, k, spread } => {
                put("data.generator", "blobs".into());
                put("data.n", n.to_string());
                put("data.k", k.to_string());
                put("data.spread", spread.to_string());
            }
            DataSource::Csv { path, classes } => {
                put("data.generator", "csv".into());
                put("data.path", path.display().to_string());
                if let Some(c) = classes {
                    put("data.classes", c.to_string());
                }
            }
            DataSource::Idx { images, labels } => {
                put("data.generator", "idx".into());
                put("data.images", images.display().to_string());
                put("data.labels", labels.display().to_string());
            }
        }
        put("data.seed", self.data.seed.to_string());
        put("data.test_fraction", self.data.test_fraction.to_string());
        put("retrain.epochs", self.retrain.epochs.to_string());
        put("retrain.batch_size", self.retrain.batch_size.to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        put("run.seeds", seeds.join(","));
        put("run.out", self.out.display().to_string());
        write_optimizer(&mut out, "search.inner", &s.inner);
        write_optimizer(&mut out, "search.outer", &s.outer);
        write_optimizer(&mut out, "retrain", &self.retrain.optimizer);
        out.sort();
        out
    }

    /// Sorted `key = value` lines; parses back to an equal config.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`canonical`](Self::canonical), ignoring the output
    /// directory and seed list so per-seed artifacts of one experiment
    /// share a digest.
    pub fn digest(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| k != "run.out" && k != "run.seeds")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn dataset(&self) -> Result<Dataset, grafs_core::data::DataError> {
        let seed = self.data.seed;
        match &self.data.source {
            DataSource::Spirals { n, noise } => gen_spirals(*n, *noise, seed),
            DataSource::Blobs { n, k, spread } => gen_blobs(*n, *k, *spread, seed),
            DataSource::Csv { path, classes } => load_csv(path, *classes),
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
    }

    /// `(pool, test)`: search and retraining draw on the pool; the test
    /// side is only ever scored.
    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset), grafs_core::data::DataError> {
        data.split(
            1.0 - self.data.test_fraction,
            derive_seed(self.data.seed, &[TEST_SPLIT_STREAM]),
        )
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            original: m.activation,
            standardize: m.standardize,
            image: m.image,
            kernel: m.kernel,
            ..ModelSpec::new(m.family, input_dim, m.width, m.depth, classes)
        }
    }

    pub fn search_config(&self, seed: u64) -> SearchConfig {
        SearchConfig { seed, ..self.search }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.retrain.epochs,
            batch_size: self.retrain.batch_size,
            accumulation: 1,
            optimizer: self.retrain.optimizer,
            seed,
        }
    }
}
