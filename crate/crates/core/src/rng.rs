//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed plus a tag, so independent consumers never share
//! state and reruns are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
