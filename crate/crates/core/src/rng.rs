//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of the root seed and a path of labels, never of execution
//! order. Parallel workers therefore produce identical bytes regardless of
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a parent seed, a label and an index.
pub fn derive(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ label_hash(label)).wrapping_add(splitmix(index)))
}

/// Stream for (seed, label, index).
pub fn stream(seed: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, index))
}
