//! Deterministic seed derivation for parallel jobs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes a global seed together with labelled job coordinates.
pub fn derive_seed(global: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Seed for trial `trial` of target `target_id`.
pub fn trial_seed(global: u64, target_id: &str, trial: usize) -> u64 {
    derive_seed(global, target_id, &[trial as u64])
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
