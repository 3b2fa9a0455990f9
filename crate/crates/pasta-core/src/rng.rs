//! Deterministic seed derivation and content checksums.
//!
//! Every random decision in the workbench draws from a [`ChaCha8Rng`] whose
//! seed is derived from the single global seed plus a stage name and index.
//! This makes any stage independently re-runnable: the trigger phase of
//! epoch 3 sees the same stream whether or not evaluation ran in between.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over raw bytes; used for phase-isolation checksums and
/// determinism digests of in-memory tensors.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer; decorrelates structured inputs into seed material.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(global, stage, index)`.
///
/// The stage name is hashed with FNV-1a so adding stages never perturbs the
/// streams of existing ones.
pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    let s = fnv1a64(stage.as_bytes());
    splitmix64(global ^ splitmix64(s ^ splitmix64(index)))
}

/// A seeded generator for the given stage and index.
pub fn stage_rng(global: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, stage, index))
}

/// In-place Fisher–Yates shuffle driven by an explicit generator.
pub fn shuffle<T, R: rand::Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Samples `k` distinct values from `0..n` (uniform, order unspecified).
pub fn sample_distinct<R: rand::Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} distinct values from 0..{n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
