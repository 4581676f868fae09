use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FsacError, Result};

/// Splits `0..n_samples` into contiguous batches. Without shuffling the batches
/// follow reading order, which keeps neighbouring frames together; with
/// shuffling a seeded permutation is cut instead.
pub fn make_batches(n_samples: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(FsacError::invalid("batch_size", "must be >= 2"));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
