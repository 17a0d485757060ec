//! Deterministic derivation of independent RNG streams from one master seed.
//!
//! Every stage of a run (user placement, clustering restarts, network init,
//! exploration noise, fading draws, replay sampling, evaluation) gets its own
//! stream so that changing how much randomness one stage consumes never
//! perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; stable across platforms and releases.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a salt into a base seed.
pub fn mix(base: u64, salt: u64) -> u64 {
    splitmix64(base ^ splitmix64(salt))
}

/// A seeded stream for one named stage.
pub fn stream(base: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(base, salt))
}

pub const SALT_UES: u64 = 0x5545;
pub const SALT_KMEANS: u64 = 0x4b4d;
pub const SALT_NET_INIT: u64 = 0x4e49;
pub const SALT_EXPLORE: u64 = 0x4558;
pub const SALT_ENV: u64 = 0x454e;
pub const SALT_REPLAY: u64 = 0x5250;
pub const SALT_EVAL: u64 = 0x4556;
