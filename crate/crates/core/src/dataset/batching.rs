use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::EmbeddingBundle;
use crate::error::{invalid, Result};
use crate::seed;

/// One minibatch: positions into the bundle plus the two views to use.
///
/// Labels are only reachable for labeled members.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    bundle: &'a EmbeddingBundle,
    sample_indices: Vec<usize>,
    view_b: usize,
}

impl<'a> Batch<'a> {
    pub fn sample_indices(&self) -> &[usize] {
        &self.sample_indices
    }
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
    /// View index of the first view (always the canonical view 0).
    pub fn view_a_index(&self) -> usize {
        0
    }
    pub fn view_b_index(&self) -> usize {
        self.view_b
    }
    pub fn view_a(&self) -> Array2<f32> {
        self.bundle.gather(&self.sample_indices, 0)
    }
    pub fn view_b(&self) -> Array2<f32> {
        self.bundle.gather(&self.sample_indices, self.view_b)
    }
    pub fn labeled_submask(&self) -> Vec<bool> {
        let mask = self.bundle.is_labeled();
        self.sample_indices.iter().map(|&i| mask[i]).collect()
    }
    /// `(position in batch, class)` for labeled members only.
    pub fn labeled_targets(&self) -> Vec<(usize, u32)> {
        let mask = self.bundle.is_labeled();
        let labels = self.bundle.labels();
        self.sample_indices
            .iter()
            .enumerate()
            .filter(|(_, &i)| mask[i])
            .map(|(p, &i)| (p, labels[i]))
            .collect()
    }
}

/// Deterministic shuffled partition of the bundle for one epoch.
///
/// When both kinds are plentiful, every batch is seeded with one labeled and
/// one unlabeled sample before the rest is filled from a joint shuffle. The
/// second view is drawn once per epoch among views other than 0 (view 0 when
/// the bundle has a single view).
pub fn iterate_minibatches(
    bundle: &EmbeddingBundle,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch<'_>>> {
    let n = bundle.n_samples();
    if batch_size < 2 {
        return Err(invalid!("batch_size must be at least 2, got {batch_size}"));
    }
    if batch_size > n {
        return Err(invalid!("batch_size {batch_size} exceeds n_samples {n}"));
    }
    let mut rng = seed::rng(epoch_seed, "minibatch", 0);
    let view_b = if bundle.n_views() > 1 {
        rng.random_range(1..bundle.n_views())
    } else {
        0
    };

    let n_batches = n.div_ceil(batch_size);
    let sizes: Vec<usize> = (0..n_batches)
        .map(|b| batch_size.min(n - b * batch_size))
        .collect();

    let mask = bundle.is_labeled();
    let mut labeled: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut unlabeled: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    labeled.shuffle(&mut rng);
    unlabeled.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut pool: Vec<usize>;
    if labeled.len() >= n_batches && unlabeled.len() >= n_batches {
        for (b, batch) in batches.iter_mut().enumerate() {
            batch.push(labeled[b]);
            batch.push(unlabeled[b]);
        }
        pool = labeled[n_batches..]
            .iter()
            .chain(&unlabeled[n_batches..])
            .copied()
            .collect();
    } else {
        pool = labeled.into_iter().chain(unlabeled).collect();
    }
    pool.shuffle(&mut rng);
    let mut rest = pool.into_iter();
    for (batch, &size) in batches.iter_mut().zip(&sizes) {
        while batch.len() < size {
            batch.push(rest.next().expect("pool covers remaining slots"));
        }
        batch.shuffle(&mut rng);
    }

    Ok(batches
        .into_iter()
        .map(|sample_indices| Batch {
            bundle,
            sample_indices,
            view_b,
        })
        .collect())
}
