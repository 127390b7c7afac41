//! Derivation of per-component seeds from one global seed.

use sha2::{Digest, Sha256};

/// Derives a child seed as the first 8 bytes (little endian) of
/// `sha256(base_le || label)`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Seed for step `index` of the stream named `label`.
pub fn derive_indexed(base: u64, label: &str, index: u64) -> u64 {
    derive_seed(derive_seed(base, label), &index.to_string())
}
