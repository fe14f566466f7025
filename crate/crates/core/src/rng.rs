//! Seed derivation. Every random source in the crate is a ChaCha stream
//! keyed by a root seed and a path of integers, so independent components
//! never share a stream and results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Child seed of `root` along `path`.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}
