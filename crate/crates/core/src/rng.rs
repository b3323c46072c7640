//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed, with the
//! stream id derived from a tuple of counters. Streams never share state, so
//! replications can run in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for a tuple of counters.
pub fn stream_id(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5eed_u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent generator for `(master, keys...)`.
pub fn stream(master: u64, keys: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream_id(keys));
    rng
}
