//! Seeded generator handles. Nothing in the crate touches global RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator threaded through every stochastic operation.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for `(seed, tag)`; used to give folds, epochs and
/// evaluation passes their own streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn derive(seed: u64, tag: u64) -> Rng {
    seeded(derive_seed(seed, tag))
}
