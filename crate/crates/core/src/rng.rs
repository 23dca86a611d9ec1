//! Seeded random streams. Every consumer derives its own stream from a run
//! seed and a tag so that phases never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    tag.bytes()
        .fold(splitmix64(base), |acc, b| splitmix64(acc ^ u64::from(b)))
}

pub fn stream(base: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tag))
}
