//! Seeded, splittable random streams.
//!
//! Every stochastic component draws from a `ChaCha8Rng` whose seed is derived
//! from a root seed and a path of tags, so independent streams never share
//! state and a run is reproducible from its root seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags used across the crate.
pub mod tag {
    pub const INIT: u64 = 0x1A17;
    pub const NEGATIVES: u64 = 0x4E45;
    pub const SHUFFLE: u64 = 0x5348;
    pub const NOISE: u64 = 0x4E4F;
    pub const CANDIDATES: u64 = 0xCA4D;
    pub const EVAL_NOISE: u64 = 0xE4A1;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `root`, giving a seed for an independent child stream.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(root: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(root, path))
}

/// `n` independent standard-normal draws.
pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
