//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (data, init, mask, augment, batch order) draws
//! from its own stream so that changing one factor of an experiment leaves all
//! the others bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DATA: &str = "data";
pub const STREAM_INIT: &str = "init";
pub const STREAM_MASK: &str = "mask";
pub const STREAM_AUGMENT: &str = "augment";
pub const STREAM_BATCH: &str = "batch";
pub const STREAM_SPLIT: &str = "split";

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(root, stream, index)`.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a over the stream name keeps the mapping stable across builds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(root ^ h).wrapping_add(index))
}

pub fn stream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, index))
}
