use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, GeneralityCurve, GeneralityRecord, Store, TransferError};
use crate::datasets::{partition_by_classes, subsample_per_class, DatasetBundle};
use crate::network::{apply_obstination, decode_checkpoint, encode_checkpoint, hex_string, Checkpoint, Layer, Network};
use crate::optim::{evaluate, train, EpochRecord, History, OptimConfig};
use crate::seeds;
use crate::tensor::Scalar;

/// Trains a randomly initialized network on `data` and returns it with its
/// test accuracy at the best-validation epoch.
pub fn train_base<S: Scalar>(
    data: &DatasetBundle,
    arch: &Architecture,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(Network<S>, f64, History), TransferError> {
    let spec = arch.spec(data.num_classes(), data.image_shape());
    let net = Network::<S>::build(spec, seeds::derive(seed, "init"))?;
    let (net, history) = train(net, data, cfg, seeds::derive(seed, "train"))?;
    let psi = evaluate(&net, &data.test)?;
    Ok((net, psi, history))
}

fn layers_bitwise_eq<S: Scalar>(a: &Layer<S>, b: &Layer<S>) -> bool {
    let pa = a.params();
    let pb = b.params();
    let params_eq = pa.len() == pb.len()
        && pa
            .iter()
            .zip(&pb)
            .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb));
    let stats_eq = match (a, b) {
        (Layer::Batchnorm { running: ra, .. }, Layer::Batchnorm { running: rb, .. }) => {
            ra.mean.bitwise_eq(&rb.mean) && ra.var.bitwise_eq(&rb.var)
        }
        _ => true,
    };
    params_eq && stats_eq
}

/// Retrains a copy of `base` on `data` with `k` degrees of freedom. Every
/// frozen layer is checked bitwise against `base` afterwards.
pub fn prejudice_retrain<S: Scalar>(
    base: &Network<S>,
    data: &DatasetBundle,
    k: usize,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(Network<S>, f64, History), TransferError> {
    let expected = base.spec().input_shape;
    if data.image_shape() != expected {
        return Err(TransferError::InputShape {
            expected,
            actual: data.image_shape(),
        });
    }
    let mut net = base.clone();
    apply_obstination(&mut net, k, data.num_classes(), seeds::derive(seed, "reinit"))?;
    let (net, history) = train(net, data, cfg, seeds::derive(seed, "retrain"))?;
    for i in 0..net.layers().len() {
        if net.is_frozen(i) && !layers_bitwise_eq(&net.layers()[i], &base.layers()[i]) {
            return Err(TransferError::FreezeViolation {
                layer: net.layer_name(i).to_string(),
            });
        }
    }
    let psi = evaluate(&net, &data.test)?;
    Ok((net, psi, history))
}

/// A base network, trained or loaded from the store.
#[derive(Debug, Clone)]
pub struct BaseRun<S> {
    pub key: String,
    pub dataset_id: String,
    pub seed: u64,
    pub net: Network<S>,
    pub psi: f64,
    pub history: History,
}

/// Outcome of one retrain job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRun {
    pub key: String,
    pub base_key: String,
    pub base_id: String,
    pub retrain_id: String,
    pub k: usize,
    pub seed: u64,
    pub psi: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaseMeta {
    key: String,
    dataset_id: String,
    dataset_digest: String,
    arch: String,
    seed: u64,
    psi: f64,
    best_epoch: Option<usize>,
    early_stopped: bool,
    config_digest: String,
}

/// Job scheduler over a worker pool, with results cached in a [`Store`].
pub struct Engine {
    store: Store,
    pool: rayon::ThreadPool,
}

fn digest_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex_string(&h.finalize())
}

/// Digest of everything that shapes training besides data and seed.
pub(crate) fn config_digest<S: Scalar>(arch: &Architecture, cfg: &OptimConfig) -> String {
    digest_parts(&[
        &serde_json::to_string(arch).expect("serializable"),
        &serde_json::to_string(cfg).expect("serializable"),
        S::DTYPE.to_string().as_str(),
    ])
}

impl Engine {
    pub fn new(store: Store, workers: usize) -> Result<Self, TransferError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| TransferError::Invalid(format!("worker pool: {e}")))?;
        Ok(Engine { store, pool })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn into_store(self) -> Store {
        self.store
    }

    /// Base network for `(data, seed)`, from the store when present.
    pub fn base<S: Scalar>(
        &self,
        data: &DatasetBundle,
        arch: &Architecture,
        cfg: &OptimConfig,
        seed: u64,
    ) -> Result<BaseRun<S>, TransferError> {
        let cd = config_digest::<S>(arch, cfg);
        let dd = data.digest();
        let key = digest_parts(&["base", &dd, &cd, &seed.to_string()]);
        let ckpt_path = format!("bases/{key}.ckpt");
        let meta_path = format!("bases/{key}.json");
        if let (Some(meta), Some(bytes)) = (
            self.store.get_json::<BaseMeta>(&meta_path)?,
            self.store.get(&ckpt_path)?,
        ) {
            let spec = arch.spec(data.num_classes(), data.image_shape());
            let ckpt = decode_checkpoint::<S>(&bytes, Some(&spec))?;
            self.store.note_hit();
            return Ok(BaseRun {
                key,
                dataset_id: meta.dataset_id,
                seed,
                net: ckpt.network,
                psi: meta.psi,
                history: History {
                    records: ckpt.history,
                    best_epoch: meta.best_epoch,
                    early_stopped: meta.early_stopped,
                },
            });
        }
        let (net, psi, history) = train_base::<S>(data, arch, cfg, seed)?;
        self.store.note_executed();
        let ckpt = Checkpoint {
            network: net.clone(),
            epoch: history.best_epoch.unwrap_or(0),
            history: history.records.clone(),
            rng: None,
        };
        self.store.put(&ckpt_path, &encode_checkpoint(&ckpt))?;
        self.store
            .put(&format!("histories/base-{key}.csv"), history.to_csv().as_bytes())?;
        self.store.put_json(
            &meta_path,
            &BaseMeta {
                key: key.clone(),
                dataset_id: data.name.clone(),
                dataset_digest: dd,
                arch: arch.name().to_string(),
                seed,
                psi,
                best_epoch: history.best_epoch,
                early_stopped: history.early_stopped,
                config_digest: cd,
            },
        )?;
        Ok(BaseRun {
            key,
            dataset_id: data.name.clone(),
            seed,
            net,
            psi,
            history,
        })
    }

    /// Retrain of `base` on `data` at `k`, from the store when present.
    pub fn retrain<S: Scalar>(
        &self,
        base: &BaseRun<S>,
        data: &DatasetBundle,
        cfg: &OptimConfig,
        k: usize,
        seed: u64,
    ) -> Result<RetrainRun, TransferError> {
        let key = digest_parts(&[
            "retrain",
            &base.key,
            &data.digest(),
            &serde_json::to_string(cfg).expect("serializable"),
            &k.to_string(),
            &seed.to_string(),
        ]);
        let path = format!("retrains/{key}.json");
        if let Some(run) = self.store.get_json::<RetrainRun>(&path)? {
            self.store.note_hit();
            return Ok(run);
        }
        let (_, psi, history) = prejudice_retrain(&base.net, data, k, cfg, seed)?;
        self.store.note_executed();
        let run = RetrainRun {
            key: key.clone(),
            base_key: base.key.clone(),
            base_id: base.dataset_id.clone(),
            retrain_id: data.name.clone(),
            k,
            seed,
            psi,
            best_epoch: history.best_epoch,
            history: history.records.clone(),
        };
        self.store
            .put(&format!("histories/retrain-{key}.csv"), history.to_csv().as_bytes())?;
        self.store.put_json(&path, &run)?;
        Ok(run)
    }

    /// Runs every `(base, retrain, seed, ks)` task: base networks first,
    /// deduplicated, then all retrains. Records come back in task order.
    fn run_tasks<S: Scalar>(
        &self,
        datasets: &[DatasetBundle],
        tasks: &[Task],
        arch: &Architecture,
        cfg: &OptimConfig,
    ) -> Result<Vec<GeneralityRecord>, TransferError> {
        let shape = datasets[0].image_shape();
        if let Some(d) = datasets.iter().find(|d| d.image_shape() != shape) {
            return Err(TransferError::InputShape {
                expected: shape,
                actual: d.image_shape(),
            });
        }
        let needed: BTreeSet<(usize, u64)> = tasks
            .iter()
            .flat_map(|t| [(t.base, t.seed), (t.retrain, t.seed)])
            .collect();
        let needed: Vec<(usize, u64)> = needed.into_iter().collect();
        let bases: Vec<BaseRun<S>> = self.pool.install(|| {
            needed
                .par_iter()
                .map(|&(d, seed)| self.base::<S>(&datasets[d], arch, cfg, seed))
                .collect::<Result<_, _>>()
        })?;
        let bases: BTreeMap<(usize, u64), BaseRun<S>> = needed.into_iter().zip(bases).collect();
        let jobs: Vec<(usize, usize)> = tasks
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| t.ks.iter().map(move |&k| (ti, k)))
            .collect();
        let runs: Vec<RetrainRun> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(ti, k)| {
                    let t = &tasks[ti];
                    self.retrain(&bases[&(t.base, t.seed)], &datasets[t.retrain], cfg, k, t.seed)
                })
                .collect::<Result<_, _>>()
        })?;
        let cd = config_digest::<S>(arch, cfg);
        let mut records = Vec::with_capacity(runs.len());
        for (&(ti, k), run) in jobs.iter().zip(&runs) {
            let t = &tasks[ti];
            let reference = &bases[&(t.retrain, t.seed)];
            let rec = GeneralityRecord::new(
                datasets[t.base].name.clone(),
                datasets[t.retrain].name.clone(),
                k,
                t.seed,
                reference.psi,
                run.psi,
                cd.clone(),
            )?;
            let rkey = digest_parts(&["record", &run.key, &reference.key]);
            self.store.put_json(&format!("records/{rkey}.json"), &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

struct Task {
    base: usize,
    retrain: usize,
    seed: u64,
    ks: Vec<usize>,
}

fn resolve_ks(
    arch: &Architecture,
    data: &DatasetBundle,
    ks: Option<&[usize]>,
) -> Result<(usize, Vec<usize>), TransferError> {
    let n = arch.spec(data.num_classes(), data.image_shape()).freezable_count();
    let ks = match ks {
        Some(ks) => ks.to_vec(),
        None => (0..=n).collect(),
    };
    if let Some(&bad) = ks.iter().find(|&&k| k > n) {
        return Err(crate::network::NetworkError::DegreesOfFreedom { k: bad, n }.into());
    }
    if ks.is_empty() {
        return Err(TransferError::Invalid("no degrees of freedom requested".into()));
    }
    Ok((n, ks))
}

fn check_seeds(seeds: &[u64]) -> Result<(), TransferError> {
    if seeds.is_empty() {
        return Err(TransferError::Invalid("at least one seed is required".into()));
    }
    Ok(())
}

fn assemble(pairs: &[(String, String)], n: usize, records: Vec<GeneralityRecord>) -> Vec<GeneralityCurve> {
    pairs
        .iter()
        .map(|(b, r)| {
            let recs: Vec<GeneralityRecord> = records
                .iter()
                .filter(|x| &x.base_id == b && &x.retrain_id == r)
                .cloned()
                .collect();
            let mut refs: BTreeMap<u64, f64> = BTreeMap::new();
            for x in &recs {
                refs.insert(x.seed, x.psi_base_random);
            }
            let psi_reference = refs.values().sum::<f64>() / refs.len().max(1) as f64;
            GeneralityCurve {
                base_id: b.clone(),
                retrain_id: r.clone(),
                n,
                psi_reference,
                records: recs,
            }
        })
        .collect()
}

/// Generality of `base` for `retrain` at every requested `k` (all of
/// `0..=N` by default), one record per seed and `k`.
#[allow(clippy::too_many_arguments)]
pub fn generality_curve<S: Scalar>(
    engine: &Engine,
    base: &DatasetBundle,
    retrain: &DatasetBundle,
    arch: &Architecture,
    cfg: &OptimConfig,
    seeds: &[u64],
    ks: Option<&[usize]>,
) -> Result<GeneralityCurve, TransferError> {
    check_seeds(seeds)?;
    let (n, ks) = resolve_ks(arch, retrain, ks)?;
    let same = base == retrain;
    let datasets = if same {
        vec![base.clone()]
    } else {
        vec![base.clone(), retrain.clone()]
    };
    let r = if same { 0 } else { 1 };
    let tasks: Vec<Task> = seeds
        .iter()
        .map(|&seed| Task {
            base: 0,
            retrain: r,
            seed,
            ks: ks.clone(),
        })
        .collect();
    let records = engine.run_tasks::<S>(&datasets, &tasks, arch, cfg)?;
    Ok(assemble(&[(base.name.clone(), retrain.name.clone())], n, records).remove(0))
}

/// Curves for every ordered pair of `datasets`, diagonal included. Base
/// networks are shared across pairs.
pub fn generality_matrix<S: Scalar>(
    engine: &Engine,
    datasets: &[DatasetBundle],
    arch: &Architecture,
    cfg: &OptimConfig,
    seeds: &[u64],
    ks: Option<&[usize]>,
) -> Result<Vec<GeneralityCurve>, TransferError> {
    check_seeds(seeds)?;
    if datasets.len() < 2 {
        return Err(TransferError::Invalid(
            "a generality matrix needs at least two datasets".into(),
        ));
    }
    let names: BTreeSet<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
    if names.len() != datasets.len() {
        return Err(TransferError::Invalid(
            "dataset names in a matrix must be distinct".into(),
        ));
    }
    let (n, ks) = resolve_ks(arch, &datasets[0], ks)?;
    let mut tasks = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..datasets.len() {
        for j in 0..datasets.len() {
            pairs.push((datasets[i].name.clone(), datasets[j].name.clone()));
            for &seed in seeds {
                tasks.push(Task {
                    base: i,
                    retrain: j,
                    seed,
                    ks: ks.clone(),
                });
            }
        }
    }
    let records = engine.run_tasks::<S>(datasets, &tasks, arch, cfg)?;
    Ok(assemble(&pairs, n, records))
}

/// Prejudices on `base_classes` of `data` and retrains on the remaining
/// classes.
pub fn class_generality<S: Scalar>(
    engine: &Engine,
    data: &DatasetBundle,
    base_classes: &[usize],
    arch: &Architecture,
    cfg: &OptimConfig,
    seeds: &[u64],
    ks: Option<&[usize]>,
) -> Result<GeneralityCurve, TransferError> {
    let (a, b) = partition_by_classes(data, base_classes)?;
    generality_curve::<S>(engine, &a, &b, arch, cfg, seeds, ks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
    Prejudiced,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Random => "random",
            Init::Prejudiced => "prejudiced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub p: usize,
    pub init: Init,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracy grid over `(p, init, k)`. Random-init rows exist only at
/// `k = N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleTable {
    pub n: usize,
    pub rows: Vec<SubsampleRow>,
    pub records: Vec<GeneralityRecord>,
}

pub const SUBSAMPLE_CSV_HEADER: &str = "p,init,k,accuracy";

impl SubsampleTable {
    pub fn p_values(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.rows.iter().map(|r| r.p).collect();
        s.into_iter().collect()
    }

    /// Per-seed accuracies of one cell.
    pub fn cell(&self, p: usize, init: Init, k: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.p == p && r.init == init && r.k == k)
            .map(|r| r.accuracy)
            .collect()
    }

    /// One row per cell with the mean accuracy over seeds.
    pub fn to_csv(&self) -> String {
        let mut cells: BTreeMap<(usize, Init, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            cells.entry((r.p, r.init, r.k)).or_default().push(r.accuracy);
        }
        let mut out = String::from(SUBSAMPLE_CSV_HEADER);
        out.push('\n');
        for ((p, init, k), accs) in cells {
            writeln!(out, "{p},{},{k},{}", init.name(), super::mean(&accs)).expect("write to string");
        }
        out
    }
}

/// For each `p`, keeps `p` training samples per retrain class, then trains
/// from random with every layer free and retrains the prejudiced base at
/// each `k`.
#[allow(clippy::too_many_arguments)]
pub fn subsample_generality<S: Scalar>(
    engine: &Engine,
    data: &DatasetBundle,
    base_classes: &[usize],
    p_values: &[usize],
    arch: &Architecture,
    cfg: &OptimConfig,
    seeds: &[u64],
    ks: Option<&[usize]>,
) -> Result<SubsampleTable, TransferError> {
    check_seeds(seeds)?;
    if p_values.is_empty() || p_values.contains(&0) {
        return Err(TransferError::Invalid(
            "p values must be a non-empty list of positive counts".into(),
        ));
    }
    let (a, b) = partition_by_classes(data, base_classes)?;
    let (n, ks) = resolve_ks(arch, &b, ks)?;
    let mut datasets = vec![a];
    let mut tasks = Vec::new();
    let mut task_p = Vec::new();
    for &p in p_values {
        for &seed in seeds {
            datasets.push(subsample_per_class(
                &b,
                p,
                seeds::derive(seed, &format!("subsample/{p}")),
            )?);
            tasks.push(Task {
                base: 0,
                retrain: datasets.len() - 1,
                seed,
                ks: ks.clone(),
            });
            task_p.push(p);
        }
    }
    let records = engine.run_tasks::<S>(&datasets, &tasks, arch, cfg)?;
    let mut rows = Vec::new();
    let mut at = 0;
    for (t, &p) in tasks.iter().zip(&task_p) {
        let recs = &records[at..at + t.ks.len()];
        at += t.ks.len();
        rows.push(SubsampleRow {
            p,
            init: Init::Random,
            k: n,
            seed: t.seed,
            accuracy: recs[0].psi_base_random,
        });
        for r in recs {
            rows.push(SubsampleRow {
                p,
                init: Init::Prejudiced,
                k: r.k,
                seed: t.seed,
                accuracy: r.psi_retrained,
            });
        }
    }
    Ok(SubsampleTable { n, rows, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic, Family, SyntheticSizes};
    use crate::network::LayerSpec;
    use crate::optim::EarlyStop;

    fn small_arch() -> Architecture {
        Architecture::Custom(vec![
            LayerSpec::Conv { kernels: 4, size: 5 },
            LayerSpec::Relu,
            LayerSpec::Maxpool,
            LayerSpec::Dense { width: 16 },
            LayerSpec::Relu,
            LayerSpec::SoftmaxClassifier,
        ])
    }

    fn quick_cfg(epochs: usize) -> OptimConfig {
        OptimConfig {
            lr0: 0.002,
            momentum_range: [0.5, 0.9],
            momentum_ramp_epochs: 2,
            max_epochs: epochs,
            batch_size: 20,
            early_stop: EarlyStop {
                enabled: false,
                patience: 20,
            },
            ..OptimConfig::default()
        }
    }

    fn data() -> DatasetBundle {
        make_synthetic(
            Family::Strokes,
            SyntheticSizes {
                train: 60,
                valid: 20,
                test: 30,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn retrain_freezes_prefix() {
        let d = data();
        let (base, _, _) = train_base::<f32>(&d, &small_arch(), &quick_cfg(2), 1).unwrap();
        let (net, psi, h) = prejudice_retrain(&base, &d, 1, &quick_cfg(2), 1).unwrap();
        assert!((0.0..=1.0).contains(&psi));
        assert_eq!(h.records.len(), 2);
        assert!(layers_bitwise_eq(&net.layers()[0], &base.layers()[0]));
        assert!(!layers_bitwise_eq(&net.layers()[3], &base.layers()[3]));
    }

    #[test]
    fn untrained_base_is_near_chance() {
        let d = data();
        let (_, psi, h) = train_base::<f32>(&d, &small_arch(), &quick_cfg(0), 1).unwrap();
        assert!(h.records.is_empty());
        assert!(psi <= 0.4, "untrained accuracy {psi}");
    }

    #[test]
    fn curve_shape_and_cache() {
        let d = data();
        let engine = Engine::new(Store::in_memory(), 1).unwrap();
        let c = generality_curve::<f32>(&engine, &d, &d, &small_arch(), &quick_cfg(1), &[1], None).unwrap();
        assert_eq!(c.n, 2);
        assert_eq!(c.ks(), vec![0, 1, 2]);
        assert!(c.records.iter().all(GeneralityRecord::is_exact));
        let first = engine.store().stats();
        assert_eq!(first.executed, 4);
        let again = generality_curve::<f32>(&engine, &d, &d, &small_arch(), &quick_cfg(1), &[1], None).unwrap();
        assert_eq!(again, c);
        assert_eq!(engine.store().stats().executed, 4);
    }

    #[test]
    fn class_generality_rejects_full_partition() {
        let d = data();
        let engine = Engine::new(Store::in_memory(), 1).unwrap();
        let all: Vec<usize> = (0..10).collect();
        assert!(class_generality::<f32>(&engine, &d, &all, &small_arch(), &quick_cfg(1), &[1], None).is_err());
    }

    #[test]
    fn subsample_grid_layout() {
        let d = data();
        let engine = Engine::new(Store::in_memory(), 1).unwrap();
        let t = subsample_generality::<f32>(&engine, &d, &[0, 1, 2], &[1], &small_arch(), &quick_cfg(1), &[3], None)
            .unwrap();
        assert_eq!(t.p_values(), vec![1]);
        assert_eq!(t.cell(1, Init::Random, 2).len(), 1);
        assert!(t.cell(1, Init::Random, 0).is_empty());
        assert_eq!(t.cell(1, Init::Prejudiced, 0).len(), 1);
        assert_eq!(t.to_csv().lines().count(), 1 + 1 + 3);
    }

    #[test]
    fn matrix_has_all_pairs() {
        let a = data().with_name("a");
        let b = make_synthetic(
            Family::StrokesRotated,
            SyntheticSizes {
                train: 60,
                valid: 20,
                test: 30,
            },
            6,
        )
        .unwrap();
        let engine = Engine::new(Store::in_memory(), 2).unwrap();
        let m = generality_matrix::<f32>(&engine, &[a, b], &small_arch(), &quick_cfg(1), &[1], Some(&[0])).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(engine.store().stats().executed, 2 + 4);
    }
}
