//! Derivation of independent seeds from one experiment seed.

use sha2::{Digest, Sha256};

/// Seed for `purpose` under `seed`. Distinct purposes give unrelated streams.
pub fn derive(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
