//! Labelled image datasets with train/valid/test splits.
//!
//! Pixels are stored as `f32` in `[0, 1]`, NCHW per image, regardless of the
//! precision the network trains in; batches are converted on the way out.

mod idx;
mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub use idx::{export_idx, load_idx, load_idx_bundle, read_idx_images, read_idx_labels, write_idx, IdxError};
pub use synthetic::{make_synthetic, Family, Glyph, Structure, SyntheticSizes, GLYPHS, GLYPH_SIDE};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}")]
    Idx(#[from] IdxError),
    #[error("validation carve-out of {requested} exceeds the {available} training samples")]
    ValidTooLarge { requested: usize, available: usize },
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("class partition must be a non-empty proper subset of the {classes} classes")]
    BadPartition { classes: usize },
    #[error("class {class} has only {available} training samples, {requested} requested")]
    ClassTooSmall {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Which of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Valid, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Valid => "valid",
            SplitKind::Test => "test",
        }
    }
}

/// A list of `(image, label)` samples. `ids` trace each sample back to its
/// position in the originally loaded or generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    image_shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
    ids: Vec<usize>,
}

impl Split {
    pub fn new(image_shape: [usize; 3], pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self, DatasetError> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(DatasetError::Invalid(format!(
                "{} pixels do not hold {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        let ids = (0..labels.len()).collect();
        Ok(Split {
            image_shape,
            pixels,
            labels,
            ids,
        })
    }

    pub fn empty(image_shape: [usize; 3]) -> Self {
        Split {
            image_shape,
            pixels: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn pixels_per_image(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.pixels_per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Split {
        let per = self.pixels_per_image();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Split {
            image_shape: self.image_shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    fn append(&mut self, other: &Split) {
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
        self.ids.extend_from_slice(&other.ids);
    }

    /// `[B, C, H, W]` tensor of the images at `indices`.
    pub fn batch_tensor<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| S::from_f32(v).expect("f32 converts")));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape matches data")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.len() as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
    }
}

/// Train/valid/test splits plus class metadata and a transform log.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    /// Where the data came from and every transform applied since.
    pub provenance: Vec<String>,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::Test => &self.test,
        }
    }

    fn split_mut(&mut self, kind: SplitKind) -> &mut Split {
        match kind {
            SplitKind::Train => &mut self.train,
            SplitKind::Valid => &mut self.valid,
            SplitKind::Test => &mut self.test,
        }
    }

    /// Checks labels, pixel range and shape agreement across splits.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let shape = self.image_shape();
        for kind in SplitKind::ALL {
            let s = self.split(kind);
            if s.image_shape != shape {
                return Err(DatasetError::Invalid(format!(
                    "{} split has image shape {:?}, train has {shape:?}",
                    kind.name(),
                    s.image_shape
                )));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= self.num_classes()) {
                return Err(DatasetError::Invalid(format!(
                    "{} label {bad} >= class count {}",
                    kind.name(),
                    self.num_classes()
                )));
            }
            if s.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DatasetError::Invalid(format!("{} pixels outside [0, 1]", kind.name())));
            }
        }
        Ok(())
    }

    /// SHA-256 over the name, classes and every split's contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0]);
        for c in &self.class_names {
            h.update(c.as_bytes());
            h.update([0]);
        }
        for d in self.image_shape() {
            h.update((d as u64).to_le_bytes());
        }
        for kind in SplitKind::ALL {
            self.split(kind).hash_into(&mut h);
        }
        crate::network::hex_string(&h.finalize())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Moves `valid_count` training samples into the validation split, stratified
/// by label (largest-remainder quotas) and chosen by `seed`. Relative order is
/// preserved in both splits.
pub fn split_train_valid(bundle: &DatasetBundle, valid_count: usize, seed: u64) -> Result<DatasetBundle, DatasetError> {
    let n = bundle.train.len();
    if valid_count == 0 {
        return Ok(bundle.clone());
    }
    if valid_count >= n {
        return Err(DatasetError::ValidTooLarge {
            requested: valid_count,
            available: n,
        });
    }
    let by_class = bundle.train.indices_by_class(bundle.num_classes());
    let exact: Vec<f64> = by_class
        .iter()
        .map(|ix| valid_count as f64 * ix.len() as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut short = valid_count - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for c in order {
        if short == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            short -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut to_valid = vec![false; n];
    for (ix, &q) in by_class.iter().zip(&quota) {
        let mut ix = ix.clone();
        ix.shuffle(&mut rng);
        for &i in &ix[..q] {
            to_valid[i] = true;
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !to_valid[i]).collect();
    let moved: Vec<usize> = (0..n).filter(|&i| to_valid[i]).collect();
    let mut out = bundle.clone();
    out.train = bundle.train.select(&keep);
    out.valid.append(&bundle.train.select(&moved));
    out.provenance.push(format!(
        "split_train_valid: moved {valid_count} stratified train samples to valid (seed {seed})"
    ));
    Ok(out)
}

/// Splits a bundle by label into `classes_a` and the complement. Labels in
/// each part are remapped densely in ascending order of the original ids.
pub fn partition_by_classes(
    bundle: &DatasetBundle,
    classes_a: &[usize],
) -> Result<(DatasetBundle, DatasetBundle), DatasetError> {
    let k = bundle.num_classes();
    if let Some(&bad) = classes_a.iter().find(|&&c| c >= k) {
        return Err(DatasetError::UnknownClass(bad));
    }
    let a: Vec<usize> = {
        let mut v = classes_a.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if a.is_empty() || a.len() == k {
        return Err(DatasetError::BadPartition { classes: k });
    }
    let b: Vec<usize> = (0..k).filter(|c| !a.contains(c)).collect();
    let make = |part: &[usize], tag: &str| {
        let remap: BTreeMap<usize, usize> = part.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut out = DatasetBundle {
            name: format!("{}[{}]", bundle.name, join(part)),
            class_names: part.iter().map(|&c| bundle.class_names[c].clone()).collect(),
            train: Split::empty(bundle.image_shape()),
            valid: Split::empty(bundle.image_shape()),
            test: Split::empty(bundle.image_shape()),
            provenance: bundle.provenance.clone(),
        };
        for kind in SplitKind::ALL {
            let src = bundle.split(kind);
            let keep: Vec<usize> = (0..src.len()).filter(|&i| remap.contains_key(&src.labels[i])).collect();
            let mut s = src.select(&keep);
            for l in &mut s.labels {
                *l = remap[l];
            }
            *out.split_mut(kind) = s;
        }
        out.provenance.push(format!(
            "partition_by_classes: part {tag} keeps classes [{}]",
            join(part)
        ));
        out
    };
    Ok((make(&a, "a"), make(&b, "b")))
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// Keeps exactly `p` seeded training samples per class; valid and test are
/// untouched.
pub fn subsample_per_class(bundle: &DatasetBundle, p: usize, seed: u64) -> Result<DatasetBundle, DatasetError> {
    let by_class = bundle.train.indices_by_class(bundle.num_classes());
    if let Some((class, ix)) = by_class.iter().enumerate().find(|(_, ix)| ix.len() < p) {
        return Err(DatasetError::ClassTooSmall {
            class,
            available: ix.len(),
            requested: p,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(p * by_class.len());
    for ix in &by_class {
        let mut ix = ix.clone();
        ix.shuffle(&mut rng);
        keep.extend_from_slice(&ix[..p]);
    }
    keep.sort_unstable();
    let mut out = bundle.clone();
    out.train = bundle.train.select(&keep);
    out.name = format!("{}-p{p}", bundle.name);
    out.provenance.push(format!(
        "subsample_per_class: {p} train samples per class (seed {seed})"
    ));
    Ok(out)
}

/// Seeded shuffle of `0..len` cut into batches of `batch_size`; the final
/// partial batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(len, &mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
