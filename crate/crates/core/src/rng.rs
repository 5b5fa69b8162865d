//! Reproducible, splittable random streams.
//!
//! Every stochastic routine draws from a ChaCha8 stream keyed by
//! `(seed, purpose, index)`. Streams with distinct keys are statistically
//! independent, so Monte-Carlo work can be split across draws or
//! initializations in any order without changing the numbers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a ChaCha8 stream from `(seed, purpose, index)`.
///
/// The purpose string is hashed into the key, so adding a new purpose never
/// perturbs existing streams; `index` selects the ChaCha stream counter.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in purpose.as_bytes() {
        state = splitmix64(state ^ u64::from(b));
    }
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a fresh 64-bit seed from `(seed, purpose, index)`, for handing to
/// routines that take a seed of their own (e.g. per-initialization draws).
pub fn derive(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut state = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    for &b in purpose.as_bytes() {
        state = splitmix64(state ^ u64::from(b));
    }
    splitmix64(state ^ index)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
