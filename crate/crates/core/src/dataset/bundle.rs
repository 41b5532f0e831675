use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape, Result};

/// Image embeddings for one encoder over a GCD split.
///
/// Labels of unlabeled samples are kept for evaluation only; training code
/// reaches labels exclusively through [`super::Batch`], which hides them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    encoder_id: String,
    /// `[n_samples, n_views, embed_dim]`
    embeddings: Array3<f32>,
    labels: Vec<u32>,
    is_labeled: Vec<bool>,
    old_classes: BTreeSet<u32>,
    n_classes: usize,
}

impl EmbeddingBundle {
    pub fn new(
        encoder_id: impl Into<String>,
        embeddings: Array3<f32>,
        labels: Vec<u32>,
        is_labeled: Vec<bool>,
        old_classes: BTreeSet<u32>,
        n_classes: usize,
    ) -> Result<Self> {
        let bundle = Self {
            encoder_id: encoder_id.into(),
            embeddings,
            labels,
            is_labeled,
            old_classes,
            n_classes,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let (n, v, d) = self.embeddings.dim();
        if v == 0 {
            return Err(invalid!("bundle has no views"));
        }
        if d == 0 {
            return Err(invalid!("embed_dim must be positive"));
        }
        if self.labels.len() != n || self.is_labeled.len() != n {
            return Err(shape!(
                "{} samples but {} labels and {} mask entries",
                n,
                self.labels.len(),
                self.is_labeled.len()
            ));
        }
        if self.n_classes == 0 {
            return Err(invalid!("n_classes_total must be positive"));
        }
        if let Some(&c) = self.old_classes.iter().find(|&&c| c as usize >= self.n_classes) {
            return Err(invalid!("old class {c} outside 0..{}", self.n_classes));
        }
        for (i, (&y, &lab)) in self.labels.iter().zip(&self.is_labeled).enumerate() {
            if y as usize >= self.n_classes {
                return Err(invalid!("sample {i} has class {y} outside 0..{}", self.n_classes));
            }
            if lab && !self.old_classes.contains(&y) {
                return Err(invalid!(
                    "labeled sample outside old_class_set (sample {i}, class {y})"
                ));
            }
        }
        for ((i, j), row) in self
            .embeddings
            .lanes(Axis(2))
            .into_iter()
            .enumerate()
            .map(|(k, r)| ((k / v, k % v), r))
        {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(invalid!("non-finite embedding at sample {i}, view {j}"));
            }
            if row.iter().all(|&x| x == 0.0) {
                return Err(invalid!("zero embedding at sample {i}, view {j}"));
            }
        }
        Ok(())
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }
    pub fn n_samples(&self) -> usize {
        self.embeddings.dim().0
    }
    pub fn n_views(&self) -> usize {
        self.embeddings.dim().1
    }
    pub fn embed_dim(&self) -> usize {
        self.embeddings.dim().2
    }
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
    pub fn embeddings(&self) -> &Array3<f32> {
        &self.embeddings
    }
    pub fn old_classes(&self) -> &BTreeSet<u32> {
        &self.old_classes
    }
    pub fn is_labeled(&self) -> &[bool] {
        &self.is_labeled
    }
    pub fn n_labeled(&self) -> usize {
        self.is_labeled.iter().filter(|&&l| l).count()
    }

    /// Ground-truth labels for every sample. Evaluation only.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// All samples' embeddings for one view, `[n_samples, embed_dim]`.
    pub fn view(&self, view: usize) -> ArrayView2<'_, f32> {
        self.embeddings.index_axis(Axis(1), view)
    }

    /// Embeddings of `rows` under `view`.
    pub fn gather(&self, rows: &[usize], view: usize) -> Array2<f32> {
        self.view(view).select(Axis(0), rows)
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| !self.is_labeled[i]).collect()
    }

    /// Digest of sample identity (count, labels, mask). Two bundles of the same
    /// split produced by different encoders share it.
    pub fn sample_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_samples() as u64).to_le_bytes());
        for &y in &self.labels {
            h.update((y as i32).to_le_bytes());
        }
        h.update(super::format::pack_mask(&self.is_labeled));
        hex::encode(h.finalize())
    }

    /// Digest of the sample identity and every embedding value.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.sample_digest().as_bytes());
        h.update(self.encoder_id.as_bytes());
        for x in self.embeddings.iter() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Keeps only `rows`, in order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.n_samples()) {
            return Err(invalid!("row {r} out of range"));
        }
        Self::new(
            self.encoder_id.clone(),
            self.embeddings.select(Axis(0), rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
            rows.iter().map(|&r| self.is_labeled[r]).collect(),
            self.old_classes.clone(),
            self.n_classes,
        )
    }
}
