//! Seed derivation.
//!
//! Every random stream in the pipeline is keyed by a base seed plus a few
//! integers (class id, epoch, copy index, ...), so results never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of integer keys.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stable 64-bit hash of a string (first eight bytes of its SHA-256).
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, keys))
}

/// Domain tags keep streams that share numeric keys apart.
pub mod tag {
    pub const SPLIT: u64 = 1;
    pub const KFOLD: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const FOLD_RUN: u64 = 8;
    pub const SYNTH: u64 = 9;
}
