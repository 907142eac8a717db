//! Deterministic RNG stream derivation.
//!
//! Every stochastic choice draws from a ChaCha stream keyed by
//! `(run seed, purpose, a, b)`, so the data order, augmentations, mining
//! draws, and initialization are four independent streams and any of them
//! can be re-derived at an arbitrary (epoch, step) without replaying the
//! run. This is what makes checkpoint resume bit-exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a derived stream; keeps the streams independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    Init = 1,
    Data = 2,
    Augment = 3,
    Mining = 4,
    Queue = 5,
    Synthetic = 6,
    Split = 7,
    Head = 8,
    Mix = 9,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Collapse a list of identifiers into one derived seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x243f6a8885a308d3u64;
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// Derive an independent RNG for `(seed, tag, a, b)`.
pub fn stream_rng(seed: u64, tag: StreamTag, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ splitmix64(tag as u64));
    state = splitmix64(state ^ splitmix64(a.wrapping_mul(0x9e3779b97f4a7c15)));
    state = splitmix64(state ^ splitmix64(b.wrapping_mul(0xc2b2ae3d27d4eb4f)));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
