//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by `seed_from_u64(seed)` with a
//! distinct stream id per consumer, so enabling one module never shifts the
//! random draws of another. Index draws go through `u64` ranges, which keeps
//! results identical on 32- and 64-bit targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const STREAM_SUPPORT: u64 = 1;
pub const STREAM_BACKGROUND: u64 = 2;
pub const STREAM_PARAM_INIT: u64 = 3;
pub const STREAM_DOMAIN_INIT: u64 = 4;
pub const STREAM_DP_PAIRS: u64 = 5;
pub const STREAM_PROPOSALS: u64 = 6;
pub const STREAM_SYNTH: u64 = 7;
pub const STREAM_QUERY_PROPOSALS: u64 = 8;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

pub fn index_below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n as u64) as usize
}

/// Fisher-Yates shuffle of the first `take` positions (a uniform sample without
/// replacement when `take < items.len()`).
pub fn partial_shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T], take: usize) {
    let n = items.len();
    for i in 0..take.min(n) {
        let j = i + index_below(rng, n - i);
        items.swap(i, j);
    }
}

/// FNV-1a over a byte stream; used for stable fingerprints.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
