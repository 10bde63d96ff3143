use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream offset separating the cycled (smaller) domain from the primary one.
const CYCLED_STREAM: u64 = 1 << 32;

/// Permutation of `0..len` determined by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub indices: Vec<usize>,
}

/// Batches over `epochs`, each epoch a fresh seeded permutation; the final
/// partial batch of an epoch is kept.
pub fn batch_iterator(
    len: usize,
    batch_size: usize,
    seed: u64,
    epochs: Range<usize>,
) -> Result<impl Iterator<Item = Batch>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} invalid for {len} samples")));
    }
    Ok(epochs.flat_map(move |epoch| {
        let order = epoch_order(len, seed, epoch as u64);
        order
            .chunks(batch_size)
            .map(|c| Batch { epoch, indices: c.to_vec() })
            .collect::<Vec<_>>()
    }))
}

/// Paired batches for two domains of possibly different sizes. One epoch is a
/// pass over the larger domain; the smaller one is cycled through successive
/// permutations so that batch sizes always match.
pub fn paired_batches(
    len_a: usize,
    len_b: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if batch_size == 0 || batch_size > len_a.min(len_b) {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} invalid for domains of {len_a} and {len_b} samples"
        )));
    }
    let (big, small) = (len_a.max(len_b), len_a.min(len_b));
    let primary = epoch_order(big, seed, epoch as u64);
    let rounds = big.div_ceil(small);
    let mut cycled = Vec::with_capacity(rounds * small);
    for r in 0..rounds {
        let stream = CYCLED_STREAM + (epoch * rounds + r) as u64;
        cycled.extend(epoch_order(small, seed, stream));
    }
    let pairs = primary
        .chunks(batch_size)
        .zip(cycled.chunks(batch_size))
        .map(|(p, c)| {
            let c = c[..p.len()].to_vec();
            if len_a >= len_b {
                (p.to_vec(), c)
            } else {
                (c, p.to_vec())
            }
        })
        .collect();
    Ok(pairs)
}
