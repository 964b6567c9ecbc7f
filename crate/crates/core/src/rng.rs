//! Seed plumbing. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed mixed with stream labels, so independent
//! components never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a sequence of labels.
pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(base), |acc, &l| mix(acc ^ mix(l)))
}
