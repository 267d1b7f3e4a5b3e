//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "NDGCKPT\0"
//! version      u32       FORMAT_VERSION
//! dtype        u8        4 = f32, 8 = f64
//! reserved     3 bytes   zero
//! spec digest  32 bytes  SHA-256 of the network spec JSON
//! meta length  u64
//! meta         JSON      spec, freeze mask, epoch, history, rng state
//! tensor count u32
//! tensors      repeated: name length u32, name (UTF-8), rank u32,
//!              dims u64 x rank, values (dtype bytes each)
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{hex_string, Layer, Network, NetworkError, NetworkSpec};
use crate::optim::EpochRecord;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"NDGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 1 + 3 + 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint stores {found} values but {expected} was requested")]
    DType { found: String, expected: DType },
    #[error("spec digest mismatch: checkpoint {found}, expected {expected}")]
    Digest { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Serializable snapshot of a ChaCha stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A network plus training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub network: Network<S>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub rng: Option<RngState>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(network: Network<S>) -> Self {
        Checkpoint {
            network,
            epoch: 0,
            history: Vec::new(),
            rng: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: NetworkSpec,
    frozen: Vec<bool>,
    epoch: usize,
    history: Vec<EpochRecord>,
    rng: Option<RngState>,
}

fn named_tensors<S: Scalar>(net: &Network<S>) -> Vec<(String, &Tensor<S>)> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for (name, t) in layer.params() {
            out.push((format!("{i}.{name}"), t));
        }
        if let Layer::Batchnorm { running, .. } = layer {
            out.push((format!("{i}.running_mean"), &running.mean));
            out.push((format!("{i}.running_var"), &running.var));
        }
    }
    out
}

pub fn encode_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>) -> Vec<u8> {
    let net = &ckpt.network;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(S::DTYPE.size_in_bytes() as u8);
    buf.extend_from_slice(&[0; 3]);
    buf.extend_from_slice(&net.spec().digest());
    let meta = Meta {
        spec: net.spec().clone(),
        frozen: net.freeze_mask().to_vec(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        rng: ckpt.rng,
    };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    let tensors = named_tensors(net);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    let sum: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&sum);
    buf
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode_checkpoint(ckpt))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?, None)
}

/// Loads a checkpoint and requires its spec digest to equal `expected`'s.
pub fn load_checkpoint_for<S: Scalar>(
    path: impl AsRef<Path>,
    expected: &NetworkSpec,
) -> Result<Checkpoint<S>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?, Some(expected))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("length overflow".into()))
    }
}

pub fn decode_checkpoint<S: Scalar>(
    bytes: &[u8],
    expected: Option<&NetworkSpec>,
) -> Result<Checkpoint<S>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 32 {
        return Err(CheckpointError::Corrupt("file shorter than header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let dtype_size = bytes[12] as usize;
    if dtype_size != S::DTYPE.size_in_bytes() {
        return Err(CheckpointError::DType {
            found: format!("{}-byte", dtype_size),
            expected: S::DTYPE,
        });
    }
    let digest: [u8; 32] = bytes[16..48].try_into().expect("32 bytes");
    if let Some(spec) = expected {
        if spec.digest() != digest {
            return Err(CheckpointError::Digest {
                found: hex_string(&digest),
                expected: spec.digest_hex(),
            });
        }
    }

    let mut r = Reader {
        bytes: body,
        pos: HEADER_LEN,
    };
    let meta_len = r.len()?;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    if meta.spec.digest() != digest {
        return Err(CheckpointError::Corrupt(
            "embedded spec does not match header digest".into(),
        ));
    }

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * dtype_size)?;
        let data = raw.chunks_exact(dtype_size).map(S::read_le).collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after tensors".into()));
    }

    let mut network = Network::<S>::build(meta.spec.clone(), 0)?;
    for (i, layer) in network.layers_mut().iter_mut().enumerate() {
        let mut fill = |name: &str, slot: &mut Tensor<S>| -> Result<(), CheckpointError> {
            let key = format!("{i}.{name}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            Ok(())
        };
        if let Layer::Batchnorm { running, .. } = layer {
            fill("running_mean", &mut running.mean)?;
            fill("running_var", &mut running.var)?;
        }
        for (name, slot) in layer.params_mut() {
            fill(name, slot)?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unexpected tensor {extra}")));
    }
    let layers = network.layers().to_vec();
    let network = Network::from_parts(meta.spec, layers, meta.frozen)?;
    Ok(Checkpoint {
        network,
        epoch: meta.epoch,
        history: meta.history,
        rng: meta.rng,
    })
}
