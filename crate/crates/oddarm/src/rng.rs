//! Splittable, counter-based random number streams.
//!
//! Every trial, cell, and purpose gets its own ChaCha stream derived from
//! `(master seed, stream id, substream id)`, so results are reproducible no
//! matter how work is scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids keep unrelated consumers of the same master seed independent.
pub mod stream {
    pub const ENV_INIT: u64 = 1;
    pub const TRIAL: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const DRIFT: u64 = 4;
    pub const FUZZ: u64 = 5;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes `(master, stream, substream)` into a 64-bit seed.
pub fn derive_seed(master: u64, stream: u64, substream: u64) -> u64 {
    let a = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    let b = splitmix64(a ^ stream);
    splitmix64(b ^ substream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// A ChaCha8 generator on its own stream. ChaCha is counter-based, so streams
/// derived from distinct `(stream, substream)` pairs never collide in practice.
pub fn stream_rng(master: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let mut s = derive_seed(master, stream, substream);
    for chunk in seed.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}
