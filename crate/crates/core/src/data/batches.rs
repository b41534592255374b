use rand::seq::SliceRandom;

use crate::rng;

/// Splits `indices` into batches. With `shuffle` the order is a permutation
/// drawn from the `(seed, epoch)` stream, so every epoch differs but runs repeat.
pub fn make_batches(
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, "batches", &[epoch]));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
