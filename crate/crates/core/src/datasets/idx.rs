//! IDX file format (big-endian header, raw `u8` payload).
//!
//! Images use magic `0x00000803` with dims `(n, rows, cols)`; multi-channel
//! images use `0x00000804` with dims `(n, channels, rows, cols)`. Labels use
//! `0x00000801` with dim `(n)`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{split_train_valid, DatasetBundle, DatasetError, Split};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: cannot store value {value} as a byte")]
    Unrepresentable { path: PathBuf, value: String },
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an image file into `(shape [C,H,W], pixels scaled by 1/255)`.
pub fn read_idx_images(path: &Path) -> Result<([usize; 3], Vec<f32>, usize), IdxError> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    let (n, shape, header) = match magic {
        IMAGES_MAGIC => {
            let n = be_u32(&bytes, 4, path)? as usize;
            let h = be_u32(&bytes, 8, path)? as usize;
            let w = be_u32(&bytes, 12, path)? as usize;
            (n, [1, h, w], 16)
        }
        IMAGES4_MAGIC => {
            let n = be_u32(&bytes, 4, path)? as usize;
            let c = be_u32(&bytes, 8, path)? as usize;
            let h = be_u32(&bytes, 12, path)? as usize;
            let w = be_u32(&bytes, 16, path)? as usize;
            (n, [c, h, w], 20)
        }
        found => {
            return Err(IdxError::BadMagic {
                path: path.to_path_buf(),
                found,
                expected: IMAGES_MAGIC,
            })
        }
    };
    let expected = header + n * shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[header..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((shape, pixels, n))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, IdxError> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: 8 + n,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads one image/label file pair as a split.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Split, DatasetError> {
    let (shape, pixels, n) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    Split::new(shape, pixels, labels)
}

/// Loads MNIST-style file pairs from `dir` and carves a stratified
/// validation split out of train.
pub fn load_idx_bundle(
    name: &str,
    dir: &Path,
    prefix_train: &str,
    prefix_test: &str,
    valid_count: usize,
    seed: u64,
) -> Result<DatasetBundle, DatasetError> {
    let pair = |prefix: &str| {
        (
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    };
    let (tri, trl) = pair(prefix_train);
    let (tei, tel) = pair(prefix_test);
    let train = load_idx(&tri, &trl)?;
    let test = load_idx(&tei, &tel)?;
    let classes = train.labels().iter().chain(test.labels()).max().map_or(0, |&m| m + 1);
    let bundle = DatasetBundle {
        name: name.to_string(),
        class_names: (0..classes).map(|c| c.to_string()).collect(),
        valid: Split::empty(train.image_shape()),
        train,
        test,
        provenance: vec![format!("idx: {}", dir.display())],
    };
    bundle.validate()?;
    split_train_valid(&bundle, valid_count, seed)
}

fn to_byte(v: f32, path: &Path) -> Result<u8, IdxError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(IdxError::Unrepresentable {
            path: path.to_path_buf(),
            value: v.to_string(),
        });
    }
    Ok((v * 255.0).round() as u8)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    fs::write(path, bytes).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a split as an image/label file pair. Pixels are quantized to
/// `round(255 v)`.
pub fn write_idx(split: &Split, images_path: &Path, labels_path: &Path) -> Result<(), IdxError> {
    let [c, h, w] = split.image_shape();
    let mut img = Vec::with_capacity(20 + split.pixels().len());
    if c == 1 {
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(split.len() as u32).to_be_bytes());
    } else {
        img.extend_from_slice(&IMAGES4_MAGIC.to_be_bytes());
        img.extend_from_slice(&(split.len() as u32).to_be_bytes());
        img.extend_from_slice(&(c as u32).to_be_bytes());
    }
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in split.pixels() {
        img.push(to_byte(v, images_path)?);
    }
    let mut lab = Vec::with_capacity(8 + split.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(split.len() as u32).to_be_bytes());
    for &l in split.labels() {
        let b = u8::try_from(l).map_err(|_| IdxError::Unrepresentable {
            path: labels_path.to_path_buf(),
            value: l.to_string(),
        })?;
        lab.push(b);
    }
    write(images_path, &img)?;
    write(labels_path, &lab)
}

/// Writes all three splits of a bundle into `dir` as
/// `{train,valid,test}-{images-idx3,labels-idx1}-ubyte`.
pub fn export_idx(bundle: &DatasetBundle, dir: &Path) -> Result<Vec<PathBuf>, IdxError> {
    fs::create_dir_all(dir).map_err(|source| IdxError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for kind in super::SplitKind::ALL {
        let images = dir.join(format!("{}-images-idx3-ubyte", kind.name()));
        let labels = dir.join(format!("{}-labels-idx1-ubyte", kind.name()));
        write_idx(bundle.split(kind), &images, &labels)?;
        written.push(images);
        written.push(labels);
    }
    Ok(written)
}
