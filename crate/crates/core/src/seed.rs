//! Stable seed derivation. Seeds are mixed with SHA-256 so they do not depend
//! on the platform hasher or on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn fold(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Mix a list of integers into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    fold(h)
}

/// Per-sample seed from the global seed and a sample id.
pub fn for_sample(global: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    fold(h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
