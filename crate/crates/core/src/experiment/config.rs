//! Experiment configuration files (TOML).
//!
//! ```toml
//! kind = "class-gen"
//! arch = "char3conv"
//! precision = "f32"
//! seeds = [1, 2, 3]
//!
//! [optim]
//! lr0 = 0.01
//! schedule = { kind = "multiplicative", gamma = 0.998 }
//!
//! [datasets.mnist]
//! source = "idx"
//! dir = "data/mnist"
//!
//! [experiment]
//! dataset = "mnist"
//! base_classes = [4, 5, 8]
//! ```
//!
//! Every optional field gets an explicit default during normalization, and
//! the digest is taken over the normalized form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{
    load_idx_bundle, make_synthetic, subsample_per_class, DatasetBundle, DatasetError, Family, SyntheticSizes,
};
use crate::network::{ArchId, LayerSpec};
use crate::optim::{EarlyStop, OptimConfig, Schedule};
use crate::tensor::DType;
use crate::transfer::Architecture;

#[derive(Debug, Error, PartialEq)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "train-base")]
    TrainBase,
    #[serde(rename = "retrain")]
    Retrain,
    #[serde(rename = "curve")]
    Curve,
    #[serde(rename = "class-gen")]
    ClassGen,
    #[serde(rename = "subsample")]
    Subsample,
    #[serde(rename = "matrix")]
    Matrix,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::TrainBase,
        ExperimentKind::Retrain,
        ExperimentKind::Curve,
        ExperimentKind::ClassGen,
        ExperimentKind::Subsample,
        ExperimentKind::Matrix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TrainBase => "train-base",
            ExperimentKind::Retrain => "retrain",
            ExperimentKind::Curve => "curve",
            ExperimentKind::ClassGen => "class-gen",
            ExperimentKind::Subsample => "subsample",
            ExperimentKind::Matrix => "matrix",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        family: Family,
        train: usize,
        valid: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        /// Keep only this many training samples per class.
        #[serde(default)]
        train_per_class: Option<usize>,
    },
    Idx {
        dir: PathBuf,
        #[serde(default = "default_train_prefix")]
        train_prefix: String,
        #[serde(default = "default_test_prefix")]
        test_prefix: String,
        #[serde(default = "default_valid_count")]
        valid_count: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        train_per_class: Option<usize>,
    },
}

fn default_train_prefix() -> String {
    "train".into()
}

fn default_test_prefix() -> String {
    "t10k".into()
}

fn default_valid_count() -> usize {
    10_000
}

impl DatasetSource {
    /// Builds the bundle, named `name`.
    pub fn load(&self, name: &str) -> Result<DatasetBundle, DatasetError> {
        let (bundle, per_class, seed) = match self {
            DatasetSource::Synthetic {
                family,
                train,
                valid,
                test,
                seed,
                train_per_class,
            } => (
                make_synthetic(
                    *family,
                    SyntheticSizes {
                        train: *train,
                        valid: *valid,
                        test: *test,
                    },
                    *seed,
                )?,
                *train_per_class,
                *seed,
            ),
            DatasetSource::Idx {
                dir,
                train_prefix,
                test_prefix,
                valid_count,
                seed,
                train_per_class,
            } => (
                load_idx_bundle(name, dir, train_prefix, test_prefix, *valid_count, *seed)?,
                *train_per_class,
                *seed,
            ),
        };
        let bundle = match per_class {
            Some(p) => subsample_per_class(&bundle, p, seed)?,
            None => bundle,
        };
        Ok(bundle.with_name(name))
    }

    fn check_files(&self, field: &str) -> Result<(), ConfigError> {
        if let DatasetSource::Idx {
            dir,
            train_prefix,
            test_prefix,
            ..
        } = self
        {
            for prefix in [train_prefix, test_prefix] {
                for suffix in ["images-idx3-ubyte", "labels-idx1-ubyte"] {
                    let p = dir.join(format!("{prefix}-{suffix}"));
                    if !p.is_file() {
                        return Err(ConfigError::new(field, format!("missing file {}", p.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Experiment-specific settings; which fields are required depends on the
/// kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default)]
    pub retrain: Option<String>,
    #[serde(default)]
    pub datasets: Option<Vec<String>>,
    #[serde(default)]
    pub base_classes: Option<Vec<usize>>,
    #[serde(default)]
    pub p_values: Option<Vec<usize>>,
    #[serde(default)]
    pub k: Option<usize>,
    /// Degrees of freedom to evaluate; all of `0..=N` when absent.
    #[serde(default)]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    arch: String,
    #[serde(default)]
    layers: Option<Vec<LayerSpec>>,
    #[serde(default)]
    precision: Option<String>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    optim: RawOptim,
    datasets: BTreeMap<String, DatasetSource>,
    #[serde(default)]
    experiment: ExperimentParams,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptim {
    lr0: Option<f64>,
    schedule: Option<Schedule>,
    momentum_range: Option<[f64; 2]>,
    momentum_ramp_epochs: Option<usize>,
    l1: Option<f64>,
    l2: Option<f64>,
    max_epochs: Option<usize>,
    batch_size: Option<usize>,
    early_stop: Option<EarlyStop>,
    rho: Option<f64>,
    eps: Option<f64>,
    lr_floor: Option<f64>,
}

impl RawOptim {
    fn normalize(self) -> OptimConfig {
        let d = OptimConfig::default();
        OptimConfig {
            lr0: self.lr0.unwrap_or(d.lr0),
            schedule: self.schedule.unwrap_or(d.schedule),
            momentum_range: self.momentum_range.unwrap_or(d.momentum_range),
            momentum_ramp_epochs: self.momentum_ramp_epochs.unwrap_or(d.momentum_ramp_epochs),
            l1: self.l1.unwrap_or(d.l1),
            l2: self.l2.unwrap_or(d.l2),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            early_stop: self.early_stop.unwrap_or(d.early_stop),
            rho: self.rho.unwrap_or(d.rho),
            eps: self.eps.unwrap_or(d.eps),
            lr_floor: self.lr_floor.unwrap_or(d.lr_floor),
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// A fully normalized experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub arch: Architecture,
    pub precision: DType,
    pub seeds: Vec<u64>,
    pub optim: OptimConfig,
    pub datasets: BTreeMap<String, DatasetSource>,
    pub experiment: ExperimentParams,
    /// Worker threads; does not affect results and is not digested.
    #[serde(skip)]
    pub workers: usize,
    /// Output directory from the file, if any; not digested.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = field_from_toml_error(text, &e).unwrap_or_else(|| "<root>".to_string());
            ConfigError::new(field, msg)
        })?;
        let arch = match (raw.arch.as_str(), raw.layers) {
            ("custom", Some(layers)) => Architecture::Custom(layers),
            ("custom", None) => return Err(ConfigError::new("layers", "required when arch = \"custom\"")),
            (name, None) => Architecture::Preset(
                name.parse::<ArchId>()
                    .map_err(|e| ConfigError::new("arch", e.to_string()))?,
            ),
            (_, Some(_)) => return Err(ConfigError::new("layers", "only allowed when arch = \"custom\"")),
        };
        let precision = match raw.precision {
            Some(p) => p.parse().map_err(|e| ConfigError::new("precision", e))?,
            None => DType::F32,
        };
        let cfg = ExperimentConfig {
            kind: raw.kind,
            arch,
            precision,
            seeds: raw.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            optim: raw.optim.normalize(),
            datasets: raw.datasets,
            experiment: raw.experiment,
            workers: raw.workers.unwrap_or(1),
            out: raw.out,
        };
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(out) = &cfg.out {
            if out.is_relative() {
                cfg.out = Some(path.parent().unwrap_or(Path::new(".")).join(out));
            }
        }
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for src in self.datasets.values_mut() {
            if let DatasetSource::Idx { dir, .. } = src {
                if dir.is_relative() {
                    *dir = base.join(&*dir);
                }
            }
        }
    }

    fn dataset_ref(&self, field: &str, name: &Option<String>) -> Result<(), ConfigError> {
        match name {
            None => Err(ConfigError::new(field, format!("required for kind {}", self.kind))),
            Some(n) if !self.datasets.contains_key(n) => Err(ConfigError::new(field, format!("unknown dataset `{n}`"))),
            Some(_) => Ok(()),
        }
    }

    /// Field-level checks, including that referenced files exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.optim
            .validate()
            .map_err(|e| ConfigError::new("optim", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "must not be empty"));
        }
        if self.workers == 0 {
            return Err(ConfigError::new("workers", "must be positive"));
        }
        if self.datasets.is_empty() {
            return Err(ConfigError::new("datasets", "at least one dataset is required"));
        }
        for (name, src) in &self.datasets {
            let field = format!("datasets.{name}");
            if let DatasetSource::Synthetic { train, valid, test, .. } = src {
                if *train == 0 || *valid == 0 || *test == 0 {
                    return Err(ConfigError::new(field, "split sizes must be positive"));
                }
            }
            src.check_files(&field)?;
        }
        let e = &self.experiment;
        match self.kind {
            ExperimentKind::TrainBase => self.dataset_ref("experiment.dataset", &e.dataset)?,
            ExperimentKind::Retrain => {
                self.dataset_ref("experiment.base", &e.base)?;
                self.dataset_ref("experiment.retrain", &e.retrain)?;
                if e.k.is_none() {
                    return Err(ConfigError::new("experiment.k", "required for kind retrain"));
                }
            }
            ExperimentKind::Curve => {
                self.dataset_ref("experiment.base", &e.base)?;
                self.dataset_ref("experiment.retrain", &e.retrain)?;
            }
            ExperimentKind::ClassGen | ExperimentKind::Subsample => {
                self.dataset_ref("experiment.dataset", &e.dataset)?;
                match &e.base_classes {
                    None => return Err(ConfigError::new("experiment.base_classes", "required")),
                    Some(c) if c.is_empty() => {
                        return Err(ConfigError::new("experiment.base_classes", "must not be empty"))
                    }
                    Some(_) => {}
                }
                if self.kind == ExperimentKind::Subsample {
                    match &e.p_values {
                        Some(p) if !p.is_empty() && !p.contains(&0) => {}
                        _ => {
                            return Err(ConfigError::new(
                                "experiment.p_values",
                                "required list of positive per-class counts",
                            ))
                        }
                    }
                }
            }
            ExperimentKind::Matrix => match &e.datasets {
                Some(names) if names.len() >= 2 => {
                    for n in names {
                        self.dataset_ref("experiment.datasets", &Some(n.clone()))?;
                    }
                }
                _ => return Err(ConfigError::new("experiment.datasets", "at least two dataset names")),
            },
        }
        Ok(())
    }

    /// Canonical JSON of the normalized config. Maps are ordered, so key
    /// order in the source file does not matter.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    /// SHA-256 over the canonical JSON.
    pub fn digest(&self) -> String {
        crate::network::hex_string(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

fn field_from_toml_error(text: &str, e: &toml::de::Error) -> Option<String> {
    let span = e.span()?;
    let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
    let line = &text[line_start..];
    let line = line.lines().next()?;
    let key = line.split('=').next()?.trim();
    let section = text[..line_start]
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with('['))
        .map(|l| l.trim().trim_matches(|c| c == '[' || c == ']').to_string());
    if key.is_empty() || key.starts_with('[') {
        return section.or_else(|| Some(key.trim_matches(|c| c == '[' || c == ']').to_string()));
    }
    Some(match section {
        Some(s) => format!("{s}.{key}"),
        None => key.to_string(),
    })
}
