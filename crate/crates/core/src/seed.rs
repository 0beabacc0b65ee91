//! Deterministic seed derivation.
//!
//! Every stochastic stage draws its randomness from a child seed computed as
//!
//! ```text
//! child = splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
//! ```
//!
//! where `splitmix64` is the SplitMix64 finalizer
//! (`z += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//! z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`, all wrapping).
//! The rule is pure integer arithmetic, so any language can reproduce it.
//! Children are consumed by a ChaCha8 stream seeded with `seed_from_u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags mixed into derived seeds.
pub mod tag {
    pub const GRID: u64 = 0x4752_4944; // "GRID"
    pub const ENSEMBLE: u64 = 0x454E_534D;
    pub const CONCENTRATION: u64 = 0x434F_4E43;
    pub const ISPP: u64 = 0x4953_5050;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const CHIP: u64 = 0x4348_4950;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const DATA: u64 = 0x4441_5441;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
