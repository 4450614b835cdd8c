//! Seed derivation.
//!
//! Every random stream in a run descends from one master seed:
//! `seed = u64_le(SHA-256(master_le ‖ purpose ‖ 0x00 ‖ index_le)[0..8])`.
//! Streams are addressed by `(purpose, index)`, so adding trials or
//! iterations never shifts an existing stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn stream(master: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, purpose, index))
}
