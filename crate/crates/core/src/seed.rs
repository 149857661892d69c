//! Splitting one root seed into independent per-purpose streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const VMD: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for the stream identified by `root` and `path`.
/// The accumulator is scrambled before each tag is mixed in, so swapping the
/// root with a path element gives a different stream.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |acc, &p| {
        splitmix64(acc.rotate_left(23).wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ splitmix64(p))
    })
}

pub fn derive_rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
