//! Seed handling.
//!
//! Every random quantity is drawn from a ChaCha8 generator identified by a
//! `(seed, stream)` pair. Child seeds come from a SplitMix64 mix of the
//! parent seed and a tag, so experiments that fan out over seeds, factors or
//! Monte Carlo batches stay reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Streams reserved for the different consumers of a seed.
pub mod streams {
    pub const FACTOR_WEIGHTS: u64 = 1;
    pub const WORLDS: u64 = 2;
    pub const POPULATION: u64 = 3;
    pub const PERTURBATION: u64 = 4;
    pub const ATTENTION: u64 = 5;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Child seed for `tag` under `master`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}
