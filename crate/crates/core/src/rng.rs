//! Seed derivation.
//!
//! Every random draw in a run descends from a single master seed. A named
//! substream is seeded with `splitmix64(master ^ fnv1a64(label))`, and indexed
//! workers inside a substream (one per condition sample, benchmark cell, ...)
//! use the ChaCha stream id to stay independent of scheduling order.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng64 = ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the substream `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label.as_bytes()))
}

/// Generator for the substream `label`.
pub fn substream(master: u64, label: &str) -> Rng64 {
    Rng64::seed_from_u64(derive_seed(master, label))
}

/// Generator for worker `index` of substream `label`.
pub fn indexed_stream(master: u64, label: &str, index: u64) -> Rng64 {
    let mut rng = substream(master, label);
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}
