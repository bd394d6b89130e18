use rand::seq::SliceRandom;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Shuffled mini-batches of one epoch. The final partial batch is kept.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Panics if `batch_size` is zero.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[0xBA7C, epoch]));
    BatchIter { dataset, order, batch_size, pos: 0 }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.dataset.images().select_rows(&indices),
            labels: indices.iter().map(|&i| self.dataset.labels()[i]).collect(),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn data(n: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec { classes: 2, samples: n, image: [1, 1, 2], noise: 0.0, seed: 0 }).unwrap()
    }

    #[test]
    fn sizes_keep_partial_batch() {
        let d = data(10);
        let sizes: Vec<usize> = batch_iter(&d, 3, 1, 0).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let d = data(20);
        let order = |s, e| batch_iter(&d, 4, s, e).flat_map(|b| b.indices).collect::<Vec<_>>();
        assert_eq!(order(1, 2), order(1, 2));
        assert_ne!(order(1, 2), order(1, 3));
    }

    #[test]
    fn batch_contents_match_indices() {
        let d = data(6);
        for b in batch_iter(&d, 4, 0, 0) {
            assert_eq!(b.images, d.images().select_rows(&b.indices));
            for (l, &i) in b.labels.iter().zip(&b.indices) {
                assert_eq!(*l, d.labels()[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn covers_every_index_once(n in 0usize..40, bs in 1usize..9, seed: u64, epoch in 0u64..5) {
            let d = data(n);
            let it = batch_iter(&d, bs, seed, epoch);
            prop_assert_eq!(it.len(), n.div_ceil(bs));
            let mut all: Vec<usize> = it.flat_map(|b| b.indices).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
