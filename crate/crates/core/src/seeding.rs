//! Named random streams derived from one run seed.
//!
//! Every stochastic choice draws from a stream keyed by the run seed and a
//! path such as `(epoch, batch, sample)`, so results do not depend on thread
//! scheduling and a resumed run replays the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |h, p| mix(h ^ mix(*p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream labels, so unrelated uses of the same indices never collide.
pub mod tag {
    pub const TASK: u64 = 1;
    pub const BUDGET: u64 = 2;
    pub const COLLECT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DIAG: u64 = 7;
    pub const SPAWN: u64 = 8;
}
