//! Reproducible seed streams.
//!
//! Every random draw in the toolkit comes from a ChaCha generator whose seed
//! is derived from a base seed and a path of stream ids, so results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a; stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(base: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(base, path))
}

/// Stream ids used across the toolkit.
pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const TRAIN_MASK: u64 = 2;
    pub const VAL_MASK: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SWEEP_MASK: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}
