use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::SeedStream;

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Precondition("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut SeedStream::new(seed).rng_at("batches", epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
