use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig, ExperimentKind};
use crate::datasets::{DatasetBundle, DatasetError};
use crate::tensor::{DType, Scalar};
use crate::transfer::{
    class_generality, curves_to_csv, generality_curve, generality_matrix, records_to_csv, subsample_generality, Engine,
    GeneralityCurve, GeneralityRecord, Store, StoreStats, TransferError,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Summary of a run, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub kind: ExperimentKind,
    pub precision: DType,
    pub seeds: Vec<u64>,
    pub jobs_executed: usize,
    pub cache_hits: usize,
    /// True when every training job was resolved from stored results.
    pub full_cache_hit: bool,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<String>,
}

/// One base network's accuracy, as reported by `train-base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub dataset: String,
    pub seed: u64,
    pub psi: f64,
    pub best_epoch: Option<usize>,
    pub checkpoint: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write(path, &bytes)
}

fn load(cfg: &ExperimentConfig, name: &str) -> Result<DatasetBundle, RunError> {
    let src = cfg
        .datasets
        .get(name)
        .ok_or_else(|| ConfigError::new("experiment", format!("unknown dataset `{name}`")))?;
    Ok(src.load(name)?)
}

fn required<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T, RunError> {
    v.as_ref().ok_or_else(|| ConfigError::new(field, "required").into())
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), RunError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel != MANIFEST_FILE && !rel.ends_with(".tmp") {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Runs `cfg` into `out`, resolving completed jobs from `out/store`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, RunError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join("config.json"), cfg.canonical_json().as_bytes())?;
    let engine = Engine::new(Store::open(out.join("store"))?, cfg.workers)?;
    match cfg.precision {
        DType::F32 => run_kind::<f32>(cfg, &engine, out)?,
        DType::F64 => run_kind::<f64>(cfg, &engine, out)?,
    }
    let StoreStats { executed, cache_hits } = engine.store().stats();
    let mut artifacts = Vec::new();
    list_files(out, out, &mut artifacts)?;
    artifacts.sort();
    let manifest = Manifest {
        config_digest: cfg.digest(),
        kind: cfg.kind,
        precision: cfg.precision,
        seeds: cfg.seeds.clone(),
        jobs_executed: executed,
        cache_hits,
        full_cache_hit: executed == 0,
        artifacts,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn write_curves(out: &Path, curves: &[GeneralityCurve]) -> Result<(), RunError> {
    let records: Vec<GeneralityRecord> = curves.iter().flat_map(|c| c.records.clone()).collect();
    write_json(&out.join("results/curves.json"), &curves)?;
    write(&out.join("results/curve.csv"), curves_to_csv(curves).as_bytes())?;
    write(&out.join("results/records.csv"), records_to_csv(&records).as_bytes())
}

fn run_kind<S: Scalar>(cfg: &ExperimentConfig, engine: &Engine, out: &Path) -> Result<(), RunError> {
    let e = &cfg.experiment;
    let ks = e.ks.as_deref();
    let (arch, optim, seeds) = (&cfg.arch, &cfg.optim, cfg.seeds.as_slice());
    match cfg.kind {
        ExperimentKind::TrainBase => {
            let data = load(cfg, required(&e.dataset, "experiment.dataset")?)?;
            let mut summary = Vec::new();
            for &seed in seeds {
                let run = engine.base::<S>(&data, arch, optim, seed)?;
                summary.push(BaseSummary {
                    dataset: data.name.clone(),
                    seed,
                    psi: run.psi,
                    best_epoch: run.history.best_epoch,
                    checkpoint: format!("store/bases/{}.ckpt", run.key),
                });
            }
            write_json(&out.join("results/bases.json"), &summary)?;
        }
        ExperimentKind::Retrain | ExperimentKind::Curve => {
            let base = load(cfg, required(&e.base, "experiment.base")?)?;
            let retrain = if e.retrain == e.base {
                base.clone()
            } else {
                load(cfg, required(&e.retrain, "experiment.retrain")?)?
            };
            let single;
            let ks = if cfg.kind == ExperimentKind::Retrain {
                single = [*required(&e.k, "experiment.k")?];
                Some(&single[..])
            } else {
                ks
            };
            let curve = generality_curve::<S>(engine, &base, &retrain, arch, optim, seeds, ks)?;
            write_curves(out, &[curve])?;
        }
        ExperimentKind::ClassGen => {
            let data = load(cfg, required(&e.dataset, "experiment.dataset")?)?;
            let classes = required(&e.base_classes, "experiment.base_classes")?;
            let curve = class_generality::<S>(engine, &data, classes, arch, optim, seeds, ks)?;
            write_curves(out, &[curve])?;
        }
        ExperimentKind::Subsample => {
            let data = load(cfg, required(&e.dataset, "experiment.dataset")?)?;
            let classes = required(&e.base_classes, "experiment.base_classes")?;
            let ps = required(&e.p_values, "experiment.p_values")?;
            let table = subsample_generality::<S>(engine, &data, classes, ps, arch, optim, seeds, ks)?;
            write_json(&out.join("results/subsample.json"), &table)?;
            write(&out.join("results/subsample.csv"), table.to_csv().as_bytes())?;
            write(
                &out.join("results/records.csv"),
                records_to_csv(&table.records).as_bytes(),
            )?;
        }
        ExperimentKind::Matrix => {
            let names = required(&e.datasets, "experiment.datasets")?;
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(ConfigError::new("experiment.datasets", "names must be distinct").into());
            }
            let data = names.iter().map(|n| load(cfg, n)).collect::<Result<Vec<_>, _>>()?;
            let curves = generality_matrix::<S>(engine, &data, arch, optim, seeds, ks)?;
            write_curves(out, &curves)?;
        }
    }
    Ok(())
}

/// Reads the manifest of a finished run.
pub fn read_manifest(out: &Path) -> Result<Manifest, RunError> {
    let path = out.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| RunError::Io {
        path,
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}
