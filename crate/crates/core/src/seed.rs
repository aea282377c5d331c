//! Seed derivation: one global seed fans out to independent per-stage streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a child seed from `parent` and a label by hashing both.
pub fn derive(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Derive a child seed from `parent`, a label and an index (case, epoch, ...).
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    derive(derive(parent, label), &index.to_string())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of arbitrary bytes; used for config hashes.
pub fn hash_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}
