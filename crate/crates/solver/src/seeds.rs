//! Deterministic seed derivation for independent RNG streams.
//!
//! Substreams (per trajectory, per training step, per ensemble member) are
//! derived by folding path components into the base seed with splitmix64,
//! so any component changes the whole stream and collisions between
//! different paths are not a practical concern.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of labels/indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x5851f42d4c957f2d);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p));
    }
    s
}

pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
