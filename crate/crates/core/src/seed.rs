//! Seed derivation. Every random choice in the toolchain flows from one
//! root seed through labelled child seeds, so stages stay reproducible
//! independently of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Environment variable consulted when no root seed is configured.
pub const SEED_ENV: &str = "EVOMD_SEED";

pub const DEFAULT_ROOT_SEED: u64 = 3407;

/// Child seed for `label` under `root`.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, label: &str) -> ChaCha8Rng {
    rng(derive(root, label))
}

/// Root seed from `EVOMD_SEED`, if set and numeric.
pub fn from_env() -> Option<u64> {
    std::env::var(SEED_ENV).ok()?.trim().parse().ok()
}
