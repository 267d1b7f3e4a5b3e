//! Prejudice/retrain pipelines and dataset generality.
//!
//! A base network `n(D_i|r)` is trained from a random init on `D_i`, then
//! retrained on `D_j` with the first `N - k` units frozen. Generality is the
//! ratio of that retrained accuracy to the accuracy of `n(D_j|r)`:
//!
//! ```text
//! g_k(D_i, D_j) = psi_k(D_j | D_i) / psi(D_j | r)
//! ```

mod pipeline;
mod store;

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DatasetError;
use crate::network::{ArchId, CheckpointError, LayerSpec, NetworkError, NetworkSpec};
use crate::optim::OptimError;

pub use pipeline::{
    class_generality, generality_curve, generality_matrix, prejudice_retrain, subsample_generality, train_base,
    BaseRun, Engine, Init, RetrainRun, SubsampleRow, SubsampleTable,
};
pub use store::{Store, StoreStats};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("reference accuracy is zero; generality is undefined")]
    ZeroDenominator,
    #[error("retrain images have shape {actual:?}, base network expects {expected:?}")]
    InputShape { expected: [usize; 3], actual: [usize; 3] },
    #[error("frozen layer {layer} changed during retraining")]
    FreezeViolation { layer: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Network architecture, independent of class count and input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Preset(ArchId),
    Custom(Vec<LayerSpec>),
}

impl Architecture {
    pub fn spec(&self, num_classes: usize, input_shape: [usize; 3]) -> NetworkSpec {
        match self {
            Architecture::Preset(id) => NetworkSpec::preset(*id, num_classes, input_shape),
            Architecture::Custom(layers) => NetworkSpec::custom(layers.clone(), num_classes, input_shape),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Architecture::Preset(id) => id.name(),
            Architecture::Custom(_) => "custom",
        }
    }
}

/// `psi_k / psi_base_random`.
pub fn dataset_generality(psi_k: f64, psi_base_random: f64) -> Result<f64, TransferError> {
    if psi_base_random <= 0.0 {
        return Err(TransferError::ZeroDenominator);
    }
    Ok(psi_k / psi_base_random)
}

/// One generality measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralityRecord {
    pub base_id: String,
    pub retrain_id: String,
    pub k: usize,
    pub seed: u64,
    /// Accuracy of the retrain dataset's own network from a random init.
    pub psi_base_random: f64,
    /// Accuracy after prejudicing on the base dataset and retraining with
    /// `k` degrees of freedom.
    pub psi_retrained: f64,
    pub g: f64,
    pub config_digest: String,
}

impl GeneralityRecord {
    pub fn new(
        base_id: impl Into<String>,
        retrain_id: impl Into<String>,
        k: usize,
        seed: u64,
        psi_base_random: f64,
        psi_retrained: f64,
        config_digest: impl Into<String>,
    ) -> Result<Self, TransferError> {
        Ok(GeneralityRecord {
            base_id: base_id.into(),
            retrain_id: retrain_id.into(),
            k,
            seed,
            psi_base_random,
            psi_retrained,
            g: dataset_generality(psi_retrained, psi_base_random)?,
            config_digest: config_digest.into(),
        })
    }

    /// Whether `g` is exactly the ratio of the stored accuracies.
    pub fn is_exact(&self) -> bool {
        self.psi_base_random > 0.0 && self.g == self.psi_retrained / self.psi_base_random
    }
}

pub const RECORD_CSV_HEADER: &str = "base,retrain,k,seed,psi_base,psi_k,g";

/// Flat CSV of records. Floats use the shortest representation that parses
/// back to the same value.
pub fn records_to_csv(records: &[GeneralityRecord]) -> String {
    let mut out = String::from(RECORD_CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.base_id, r.retrain_id, r.k, r.seed, r.psi_base_random, r.psi_retrained, r.g
        )
        .expect("write to string");
    }
    out
}

/// Seed-aggregated generality at one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub g_mean: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub psi_mean: f64,
}

/// Generality of one ordered dataset pair across degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralityCurve {
    pub base_id: String,
    pub retrain_id: String,
    /// Freezable units of the architecture.
    pub n: usize,
    /// Mean over seeds of the retrain dataset's random-init accuracy.
    pub psi_reference: f64,
    pub records: Vec<GeneralityRecord>,
}

impl GeneralityCurve {
    pub fn ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.records.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// Per-seed generalities at `k`, in record order.
    pub fn g_at(&self, k: usize) -> Vec<f64> {
        self.records.iter().filter(|r| r.k == k).map(|r| r.g).collect()
    }

    pub fn psi_at(&self, k: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.k == k)
            .map(|r| r.psi_retrained)
            .collect()
    }

    pub fn points(&self) -> Vec<CurvePoint> {
        self.ks()
            .into_iter()
            .map(|k| {
                let g = self.g_at(k);
                let psi = self.psi_at(k);
                CurvePoint {
                    k,
                    g_mean: mean(&g),
                    g_min: g.iter().copied().fold(f64::INFINITY, f64::min),
                    g_max: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    psi_mean: mean(&psi),
                }
            })
            .collect()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

pub const CURVE_CSV_HEADER: &str = "base,retrain,k,g_mean,g_min,g_max,psi_reference";

pub fn curves_to_csv(curves: &[GeneralityCurve]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for c in curves {
        for p in c.points() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.base_id, c.retrain_id, p.k, p.g_mean, p.g_min, p.g_max, c.psi_reference
            )
            .expect("write to string");
        }
    }
    out
}
