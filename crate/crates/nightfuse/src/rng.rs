//! Deterministic random-number plumbing.
//!
//! Every random draw in the crate flows from an explicit u64 seed through
//! a named derivation, so experiments are byte-reproducible. No ambient
//! RNG state exists anywhere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic stream used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Derives a child seed from a global seed, a stage label, and an index.
///
/// Uses an FNV-1a fold followed by a splitmix64 finalizer so nearby
/// (seed, index) pairs land far apart.
pub fn derive_seed(global: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ global;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= index;
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds a stream from a raw seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds a stream from a derived (global, label, index) seed.
pub fn labeled_stream(global: u64, label: &str, index: u64) -> Stream {
    stream(derive_seed(global, label, index))
}

/// One standard-normal f32 draw.
pub fn normal_f32(rng: &mut Stream) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

/// A vector of standard-normal f32 draws.
pub fn normal_vec(rng: &mut Stream, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal_f32(rng)).collect()
}
