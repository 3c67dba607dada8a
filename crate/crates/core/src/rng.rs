//! Seed plumbing. Every stochastic stage draws from its own ChaCha stream
//! derived from the run seed, so changing one stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags for [`sub_seed`].
pub mod stage {
    pub const SOURCES: u64 = 1;
    pub const SHADOW: u64 = 2;
    pub const PLAN: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const GPR: u64 = 5;
}

/// SplitMix64 finalizer applied to `seed ^ tag`.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag))
}
