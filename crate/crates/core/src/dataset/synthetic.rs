//! Planted concept-mixture data.
//!
//! Each class is an equal-weight mixture over its own slice of the relevant
//! concepts. Relevant teacher text embeddings are orthonormal (when
//! `n_relevant <= embed_dim`); the remaining distractor concepts are random unit
//! vectors. An image is the normalized class mixture plus isotropic content
//! noise that is specific to the sample and view.
//!
//! The student sees the same images through a weaker encoder. Its embedding
//! space is a rotation of the teacher's, its text embeddings are additionally
//! jittered, its images carry extra noise of their own on top of the shared
//! content, and every student image is offset by one shared gap vector, which
//! shifts each concept's similarity by a roughly constant amount.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConceptDictionary, EmbeddingBundle};
use crate::error::{invalid, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_concepts: usize,
    pub n_relevant: usize,
    pub embed_dim: usize,
    pub n_views: usize,
    /// Fraction of Old-class samples that are labeled.
    pub label_fraction: f64,
    /// Fraction of classes that are Old.
    pub old_fraction: f64,
    /// Norm of the content noise both encoders see.
    pub noise_scale: f64,
    /// Norm of the student's own extra image noise.
    pub student_noise: f64,
    /// Norm of the student's shared image offset.
    pub student_gap: f64,
    /// Norm of the per-concept perturbation of student text embeddings.
    pub student_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_classes: 10,
            n_concepts: 300,
            n_relevant: 60,
            embed_dim: 64,
            n_views: 2,
            label_fraction: 0.5,
            old_fraction: 0.5,
            noise_scale: 0.5,
            student_noise: 0.25,
            student_gap: 1.0,
            student_jitter: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn n_old(&self) -> usize {
        (self.old_fraction * self.n_classes as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || self.n_classes == 0 || self.embed_dim < 2 || self.n_views == 0 {
            return Err(invalid!(
                "need n_samples >= 2, n_classes >= 1, embed_dim >= 2 and n_views >= 1"
            ));
        }
        if self.n_relevant > self.n_concepts {
            return Err(invalid!(
                "n_relevant ({}) exceeds n_concepts ({})",
                self.n_relevant,
                self.n_concepts
            ));
        }
        if self.n_relevant < self.n_classes {
            return Err(invalid!(
                "n_relevant ({}) must be at least n_classes ({}) so every class owns a concept",
                self.n_relevant,
                self.n_classes
            ));
        }
        if !(self.old_fraction > 0.0 && self.old_fraction <= 1.0) || self.n_old() == 0 {
            return Err(invalid!("old_fraction * n_classes must round to at least 1"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(invalid!("label_fraction must be in (0, 1]"));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("student_noise", self.student_noise),
            ("student_gap", self.student_gap),
            ("student_jitter", self.student_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    /// Sorted indices of the concepts that appear in some class mixture.
    pub relevant_concept_indices: Vec<usize>,
    /// `[n_classes][n_concepts]` mixture weights.
    pub class_concept_mixture: Vec<Vec<f64>>,
    pub noise_scale: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub teacher: EmbeddingBundle,
    pub student: EmbeddingBundle,
    pub teacher_dict: ConceptDictionary,
    pub student_dict: ConceptDictionary,
    pub truth: SyntheticGroundTruth,
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

fn gaussian(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

/// Modified Gram–Schmidt over rows. Rows that become (numerically) dependent
/// are left as normalized random rows.
fn orthonormal_rows(mut a: Array2<f64>) -> Array2<f64> {
    for i in 0..a.nrows() {
        for j in 0..i {
            let proj = a.row(i).dot(&a.row(j));
            let rj = a.row(j).to_owned();
            a.row_mut(i).scaled_add(-proj, &rj);
        }
        let n = a.row(i).dot(&a.row(i)).sqrt();
        if n > 1e-9 {
            a.row_mut(i).mapv_inplace(|x| x / n);
        }
    }
    a
}

fn to_f32(a: Array2<f64>) -> Array2<f32> {
    a.mapv(|x| x as f32)
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let SyntheticConfig {
        n_samples: n,
        n_classes: k,
        n_concepts: m,
        n_relevant: r,
        embed_dim: d,
        n_views,
        ..
    } = *config;
    let s = config.seed;

    // Concept layout and class mixtures.
    let mut rng = seed::rng(s, "concepts", 0);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let mut relevant: Vec<usize> = perm[..r].to_vec();
    let mut mixture = Array2::<f64>::zeros((k, m));
    for (p, &j) in relevant.iter().enumerate() {
        mixture[[p % k, j]] = 1.0;
    }
    for mut row in mixture.rows_mut() {
        let total = row.sum();
        row /= total;
    }
    relevant.sort_unstable();

    // Teacher text embeddings: relevant rows orthonormal, distractors random.
    let mut teacher_text = gaussian(&mut rng, (m, d), 1.0);
    let rel_block = orthonormal_rows(teacher_text.select(Axis(0), &relevant));
    for (row, &j) in relevant.iter().enumerate() {
        teacher_text.row_mut(j).assign(&rel_block.row(row));
    }
    for mut row in teacher_text.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }

    // Student text embeddings: rotated and jittered.
    let rotation = orthonormal_rows(gaussian(&mut rng, (d, d), 1.0));
    let jitter = gaussian(&mut rng, (m, d), config.student_jitter / (d as f64).sqrt());
    let mut student_text = teacher_text.dot(&rotation.t()) + jitter;
    for mut row in student_text.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let gap = normalize(gaussian(&mut rng, (1, d), 1.0).row(0).to_owned()) * config.student_gap;

    let teacher_centers = mixture.dot(&teacher_text);
    let student_centers = mixture.dot(&student_text);
    let centers = |c: &Array2<f64>, y: usize| normalize(c.row(y).to_owned());

    // Split: balanced class assignment, Old = first n_old classes.
    let mut rng = seed::rng(s, "split", 0);
    let mut labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    labels.shuffle(&mut rng);
    let n_old = config.n_old();
    let old: BTreeSet<u32> = (0..n_old as u32).collect();
    let mut old_members: Vec<usize> = (0..n).filter(|&i| (labels[i] as usize) < n_old).collect();
    old_members.shuffle(&mut rng);
    let n_lab = (config.label_fraction * old_members.len() as f64).round() as usize;
    if n_lab == 0 {
        return Err(invalid!("configuration yields zero labeled samples"));
    }
    let mut is_labeled = vec![false; n];
    for &i in &old_members[..n_lab] {
        is_labeled[i] = true;
    }

    let content_sd = config.noise_scale / (d as f64).sqrt();
    let student_sd = config.student_noise / (d as f64).sqrt();
    let mut t_img = Array3::<f64>::zeros((n, n_views, d));
    let mut s_img = Array3::<f64>::zeros((n, n_views, d));
    let mut c_rng = seed::rng(s, "content-noise", 0);
    let mut s_rng = seed::rng(s, "student-noise", 0);
    for i in 0..n {
        let y = labels[i] as usize;
        let tc = centers(&teacher_centers, y);
        let sc = centers(&student_centers, y) + &gap;
        for v in 0..n_views {
            let content = gaussian(&mut c_rng, (1, d), content_sd).row(0).to_owned();
            let own = gaussian(&mut s_rng, (1, d), student_sd).row(0).to_owned();
            t_img
                .slice_mut(ndarray::s![i, v, ..])
                .assign(&normalize(&tc + &content));
            s_img
                .slice_mut(ndarray::s![i, v, ..])
                .assign(&normalize(&sc + &rotation.dot(&content) + &own));
        }
    }

    let names: Vec<String> = (0..m).map(|j| format!("concept_{j:05}")).collect();
    let teacher = EmbeddingBundle::new(
        "synthetic-teacher",
        t_img.mapv(|x| x as f32),
        labels.clone(),
        is_labeled.clone(),
        old.clone(),
        k,
    )?;
    let student = EmbeddingBundle::new(
        "synthetic-student",
        s_img.mapv(|x| x as f32),
        labels,
        is_labeled,
        old,
        k,
    )?;
    let teacher_dict = ConceptDictionary::new("synthetic-teacher", names.clone(), to_f32(teacher_text))?;
    let student_dict = ConceptDictionary::new("synthetic-student", names, to_f32(student_text))?;
    let truth = SyntheticGroundTruth {
        relevant_concept_indices: relevant,
        class_concept_mixture: mixture.outer_iter().map(|r| r.to_vec()).collect(),
        noise_scale: config.noise_scale,
    };
    Ok(SyntheticData {
        teacher,
        student,
        teacher_dict,
        student_dict,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_samples: 60,
            n_concepts: 40,
            n_relevant: 20,
            embed_dim: 24,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.teacher, b.teacher);
        assert_eq!(a.student, b.student);
        assert_eq!(a.student_dict, b.student_dict);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn noise_free_views_identical_within_class() {
        let cfg = SyntheticConfig {
            noise_scale: 0.0,
            student_noise: 0.0,
            ..small()
        };
        let data = generate_synthetic(&cfg).unwrap();
        for bundle in [&data.teacher, &data.student] {
            let e = bundle.embeddings();
            let labels = bundle.labels();
            for i in 0..bundle.n_samples() {
                let first = labels.iter().position(|&y| y == labels[i]).unwrap();
                for v in 0..bundle.n_views() {
                    assert_eq!(
                        e.slice(ndarray::s![i, v, ..]),
                        e.slice(ndarray::s![first, 0, ..])
                    );
                }
            }
        }
    }

    #[test]
    fn labeled_only_old_and_truth_matches_mixture() {
        let cfg = small();
        let data = generate_synthetic(&cfg).unwrap();
        let t = &data.teacher;
        for i in 0..t.n_samples() {
            if t.is_labeled()[i] {
                assert!(t.old_classes().contains(&t.labels()[i]));
            }
        }
        let support: BTreeSet<usize> = data
            .truth
            .class_concept_mixture
            .iter()
            .flat_map(|row| row.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(j, _)| j))
            .collect();
        assert_eq!(
            support.into_iter().collect::<Vec<_>>(),
            data.truth.relevant_concept_indices
        );
    }

    #[test]
    fn infeasible_configs() {
        let too_many = SyntheticConfig {
            n_relevant: 50,
            ..small()
        };
        assert!(generate_synthetic(&too_many).is_err());
        let no_old = SyntheticConfig {
            old_fraction: 0.01,
            ..small()
        };
        assert!(generate_synthetic(&no_old).is_err());
    }
}
