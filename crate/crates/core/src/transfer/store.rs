//! Content-addressed result store, on disk or in memory.
//!
//! Entries are addressed by relative paths such as `bases/<key>.ckpt`. Keys
//! are SHA-256 digests of everything that determines a job's output, so a
//! present entry is a completed job.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::TransferError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StoreStats {
    /// Training jobs actually run.
    pub executed: usize,
    /// Training jobs resolved from stored results.
    pub cache_hits: usize,
}

#[derive(Debug, Default)]
pub struct Store {
    root: Option<PathBuf>,
    memory: Mutex<HashMap<String, Vec<u8>>>,
    write_lock: Mutex<()>,
    executed: AtomicUsize,
    hits: AtomicUsize,
}

impl Store {
    /// A store that lives only as long as this value.
    pub fn in_memory() -> Self {
        Store::default()
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, TransferError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| TransferError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Store {
            root: Some(root),
            ..Store::default()
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn get(&self, rel: &str) -> Result<Option<Vec<u8>>, TransferError> {
        match &self.root {
            None => Ok(self.memory.lock().expect("store lock").get(rel).cloned()),
            Some(root) => {
                let path = root.join(rel);
                match fs::read(&path) {
                    Ok(b) => Ok(Some(b)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(source) => Err(TransferError::Io { path, source }),
                }
            }
        }
    }

    /// Writes an entry atomically; writers are serialized.
    pub fn put(&self, rel: &str, bytes: &[u8]) -> Result<(), TransferError> {
        let _guard = self.write_lock.lock().expect("store lock");
        match &self.root {
            None => {
                self.memory
                    .lock()
                    .expect("store lock")
                    .insert(rel.to_string(), bytes.to_vec());
                Ok(())
            }
            Some(root) => {
                let path = root.join(rel);
                let io = |source| TransferError::Io {
                    path: path.clone(),
                    source,
                };
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(io)?;
                }
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, bytes).map_err(io)?;
                fs::rename(&tmp, &path).map_err(io)
            }
        }
    }

    pub fn put_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), TransferError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| TransferError::Json {
            path: rel.to_string(),
            source,
        })?;
        bytes.push(b'\n');
        self.put(rel, &bytes)
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<Option<T>, TransferError> {
        self.get(rel)?
            .map(|b| {
                serde_json::from_slice(&b).map_err(|source| TransferError::Json {
                    path: rel.to_string(),
                    source,
                })
            })
            .transpose()
    }

    /// Relative paths of entries under `dir`, sorted.
    pub fn list(&self, dir: &str) -> Result<Vec<String>, TransferError> {
        let prefix = format!("{dir}/");
        let mut out: Vec<String> = match &self.root {
            None => self
                .memory
                .lock()
                .expect("store lock")
                .keys()
                .filter(|k| k.starts_with(&prefix))
                .cloned()
                .collect(),
            Some(root) => {
                let path = root.join(dir);
                match fs::read_dir(&path) {
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                    Err(source) => return Err(TransferError::Io { path, source }),
                    Ok(entries) => entries
                        .filter_map(|e| e.ok())
                        .filter_map(|e| e.file_name().into_string().ok())
                        .filter(|n| !n.ends_with(".tmp"))
                        .map(|n| format!("{prefix}{n}"))
                        .collect(),
                }
            }
        };
        out.sort();
        Ok(out)
    }

    pub(crate) fn note_executed(&self) {
        self.executed.fetch_add(1, Ordering::SeqCst);
    }

    pub(crate) fn note_hit(&self) {
        self.hits.fetch_add(1, Ordering::SeqCst);
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            executed: self.executed.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
        }
    }
}
