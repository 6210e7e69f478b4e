//! Seed plumbing.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! 64-bit seed. Columns of a sample matrix use the column index as the
//! ChaCha stream id, so a column's values never depend on how many other
//! columns were drawn first or on which thread drew them. Monte-Carlo trials
//! get their own seed through [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// SplitMix64 finalizer applied to `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `trial(t)` for `t in 0..trials` in parallel chunks and hands the
/// results to `consume` strictly in trial order, so reductions do not depend
/// on the thread count. At most `chunk` results are held at once.
pub fn for_each_trial_ordered<T, F, C>(trials: usize, chunk: usize, trial: F, mut consume: C)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
    C: FnMut(usize, T),
{
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < trials {
        let end = (start + chunk).min(trials);
        let batch: Vec<T> = (start..end).into_par_iter().map(&trial).collect();
        for (k, v) in batch.into_iter().enumerate() {
            consume(start + k, v);
        }
        start = end;
    }
}

/// Independent stream number `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
