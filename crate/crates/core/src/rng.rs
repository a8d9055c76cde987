//! Seeded random streams.
//!
//! Every stochastic quantity in a run (data, fading, receiver noise,
//! mini-batch selection) is drawn from its own ChaCha stream derived from a
//! base seed plus a small tuple of indices. Streams never depend on the order
//! in which trials or policies are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with indices into a new 64-bit seed.
pub fn derive_seed(base: u64, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix64(base), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(base: u64, indices: &[u64]) -> Stream {
    stream(derive_seed(base, indices))
}
