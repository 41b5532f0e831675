use std::collections::HashSet;

use ndarray::{Array2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape, Result};

/// Ordered concept names with one text embedding per concept for one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDictionary {
    encoder_id: String,
    concepts: Vec<String>,
    /// `[m_concepts, embed_dim]`
    embeddings: Array2<f32>,
}

impl ConceptDictionary {
    pub fn new(
        encoder_id: impl Into<String>,
        concepts: Vec<String>,
        embeddings: Array2<f32>,
    ) -> Result<Self> {
        if concepts.len() != embeddings.nrows() {
            return Err(shape!(
                "{} concept names but {} embedding rows",
                concepts.len(),
                embeddings.nrows()
            ));
        }
        if concepts.is_empty() {
            return Err(invalid!("empty concept dictionary"));
        }
        let mut seen = HashSet::with_capacity(concepts.len());
        for c in &concepts {
            if c.contains('\n') || c.contains('\r') {
                return Err(invalid!("concept name {c:?} contains a line break"));
            }
            if !seen.insert(c.as_str()) {
                return Err(invalid!("duplicate concept name {c:?}"));
            }
        }
        for (j, row) in embeddings.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(invalid!("non-finite text embedding for concept {j}"));
            }
            if row.iter().all(|&x| x == 0.0) {
                return Err(invalid!("zero-norm text embedding for concept {j}"));
            }
        }
        Ok(Self {
            encoder_id: encoder_id.into(),
            concepts,
            embeddings,
        })
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }
    pub fn len(&self) -> usize {
        self.concepts.len()
    }
    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }
    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }
    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    /// Restriction to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&j) = indices.iter().find(|&&j| j >= self.len()) {
            return Err(invalid!("concept index {j} out of range"));
        }
        Self::new(
            self.encoder_id.clone(),
            indices.iter().map(|&j| self.concepts[j].clone()).collect(),
            self.embeddings.select(Axis(0), indices),
        )
    }

    /// Digest of the encoder id, names and embedding values.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_id.as_bytes());
        for name in &self.concepts {
            h.update(name.as_bytes());
            h.update(b"\n");
        }
        for x in self.embeddings.iter() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Same concept list in the same order.
    pub fn aligned_with(&self, other: &ConceptDictionary) -> bool {
        self.concepts == other.concepts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let e = Array2::from_elem((2, 2), 1.0);
        let err = ConceptDictionary::new("x", vec!["a".into(), "a".into()], e).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn subset_keeps_order() {
        let e = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j + 1) as f32);
        let d = ConceptDictionary::new("x", vec!["a".into(), "b".into(), "c".into()], e).unwrap();
        let s = d.subset(&[2, 0]).unwrap();
        assert_eq!(s.concepts(), &["c".to_string(), "a".to_string()]);
        assert_eq!(s.embeddings().row(0)[0], 5.0);
    }
}
