//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness (initialisation, shuffling, masks, splits,
//! synthetic data, landscape directions) draws from its own stream, so a
//! change in how much one component consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream `name`, further keyed by `path` (repeat, fold, ...).
pub fn derive(root: u64, name: &str, path: &[u64]) -> u64 {
    // FNV-1a over the stream name.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut s = splitmix64(root ^ splitmix64(h));
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng(derive(root, name, path))`.
pub fn stream(root: u64, name: &str, path: &[u64]) -> Rng {
    rng(derive(root, name, path))
}
