//! Seed derivation for the deterministic simulator.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded by
//! [`derive_seed`] from an explicit base seed and a path of labels, so no two
//! subsystems share a stream and no ambient randomness leaks in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of labels into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// Builds a stream RNG for `(base, path)`.
pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Domain labels so call sites read as intent rather than magic numbers.
pub mod label {
    pub const POSITIONS: u64 = 1;
    pub const KMEANS: u64 = 2;
    pub const SERVER_LINKS: u64 = 3;
    pub const LEADER: u64 = 4;
    pub const TARGETS: u64 = 5;
    pub const RING_MATCH: u64 = 6;
    pub const KEY_POOL: u64 = 7;
    pub const CHALLENGE: u64 = 8;
    pub const VOTING: u64 = 9;
    pub const MASK: u64 = 10;
    pub const DROPOUT: u64 = 11;
    pub const SHARDS: u64 = 12;
    pub const TRAIN: u64 = 13;
    pub const REKEY: u64 = 14;
    pub const ATTACK: u64 = 15;
    pub const MONTE_CARLO: u64 = 16;
    pub const DATA: u64 = 17;
    pub const SCENARIO: u64 = 18;
}
