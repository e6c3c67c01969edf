//! Deterministic seed splitting.
//!
//! Every run is driven by one 64-bit seed. Consumers (scenario sampler,
//! network init, exploration, replay sampling, ...) each get their own
//! stream derived from that seed and a stable tag, so adding a consumer never
//! perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used everywhere in the crate. ChaCha8 is portable and reproducible
/// across platforms.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a child seed for `tag` from `root`.
pub fn derive(root: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(root) ^ fnv1a(tag))
}

/// Derive a child seed for the `index`-th member of a family (episodes,
/// evaluation states).
pub fn derive_indexed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive(root, tag) ^ splitmix64(index))
}

pub fn rng_for(root: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive(root, tag))
}

pub fn rng_indexed(root: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(root, tag, index))
}
