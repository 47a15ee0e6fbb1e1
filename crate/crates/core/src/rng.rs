//! Deterministic derivation of independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A ChaCha stream fully determined by `seed` and the ordered `tags`, so
/// draws do not depend on scheduling or on how many other streams exist.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    ChaCha8Rng::seed_from_u64(h)
}

// Stream domain tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_EPOCH: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 3;
pub(crate) const TAG_DROPOUT: u64 = 4;
pub(crate) const TAG_EVAL: u64 = 5;
pub(crate) const TAG_SYNTH: u64 = 6;
