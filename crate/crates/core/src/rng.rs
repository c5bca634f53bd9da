//! Seeded random streams. Every trial draws from its own stream derived from
//! `(seed, stream, index)`, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream) ^ index)
}

pub fn stream(seed: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub const STREAM_ENCODER_INIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_TRIAL: u64 = 3;
pub const STREAM_PLACEMENT: u64 = 4;
pub const STREAM_BASELINE: u64 = 5;
pub const STREAM_REGISTRATION: u64 = 6;
