//! Glue between stored artifacts and the trainer: builds the filtered
//! cross-modal rows both models see, and scores a trained head.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Axis};

use crate::dataset::{ConceptDictionary, EmbeddingBundle};
use crate::error::{invalid, shape, Result};
use crate::evaluation::{hungarian_accuracy, silhouette, spearman_alignment, EvalResult};
use crate::real::Real;
use crate::representation::{cross_modal, HeadParameters, Temperatures};
use crate::spectral::{spectral_filter, EigenMode, SpectralReport};

/// Teacher view used for filtering and distillation targets.
pub const TEACHER_VIEW: usize = 0;

/// Rows are processed in chunks of this size when scoring, to bound memory.
const EVAL_CHUNK: usize = 1024;

/// Filtered cross-modal rows for every sample, ready for minibatching.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// Student bundle: labels, mask, split, and the batching source.
    pub bundle: EmbeddingBundle,
    /// Student rows `cos / tau` on the retained concepts, one matrix per view.
    pub student_views: Vec<Array2<f64>>,
    /// Teacher rows on the retained concepts for the canonical view.
    pub teacher: Array2<f64>,
    /// Retained positions in the full dictionary.
    pub retained: Vec<usize>,
    pub concepts: Vec<String>,
}

impl TrainingData {
    /// Pairs a student and teacher bundle over the concepts in `retained`.
    pub fn prepare(
        student: &EmbeddingBundle,
        teacher: &EmbeddingBundle,
        student_dict: &ConceptDictionary,
        teacher_dict: &ConceptDictionary,
        retained: &[usize],
        logit_temperature: f64,
    ) -> Result<Self> {
        if student.sample_digest() != teacher.sample_digest() {
            return Err(invalid!(
                "student and teacher bundles describe different samples (labels, mask or count differ)"
            ));
        }
        if !student_dict.aligned_with(teacher_dict) {
            return Err(invalid!("student and teacher dictionaries list different concepts"));
        }
        if retained.is_empty() {
            return Err(invalid!("no concepts retained"));
        }
        let unique: BTreeSet<usize> = retained.iter().copied().collect();
        if unique.len() != retained.len() {
            return Err(invalid!("retained concept indices repeat"));
        }
        let s_dict = student_dict.subset(retained)?;
        let t_dict = teacher_dict.subset(retained)?;
        let student_views = (0..student.n_views())
            .map(|v| cross_modal(student.view(v), s_dict.embeddings().view(), logit_temperature).map(|c| c.raw))
            .collect::<Result<Vec<_>>>()?;
        let teacher_rows = cross_modal(
            teacher.view(TEACHER_VIEW),
            t_dict.embeddings().view(),
            logit_temperature,
        )?
        .raw;
        Ok(TrainingData {
            bundle: student.clone(),
            student_views,
            teacher: teacher_rows,
            retained: retained.to_vec(),
            concepts: s_dict.concepts().to_vec(),
        })
    }

    /// Like [`Self::prepare`] with the retained set taken from `report`,
    /// after checking the report was computed from this teacher and
    /// dictionary.
    pub fn from_report(
        student: &EmbeddingBundle,
        teacher: &EmbeddingBundle,
        student_dict: &ConceptDictionary,
        teacher_dict: &ConceptDictionary,
        report: &SpectralReport,
        logit_temperature: f64,
    ) -> Result<Self> {
        if report.m_concepts() != teacher_dict.len() {
            return Err(shape!(
                "report covers {} concepts, dictionary has {}",
                report.m_concepts(),
                teacher_dict.len()
            ));
        }
        if let Some(d) = &report.teacher_digest {
            if *d != teacher.content_digest() {
                return Err(invalid!("spectral report was computed from a different teacher bundle"));
            }
        }
        if let Some(d) = &report.dictionary_digest {
            if *d != teacher_dict.content_digest() {
                return Err(invalid!("spectral report was computed from a different teacher dictionary"));
            }
        }
        Self::prepare(
            student,
            teacher,
            student_dict,
            teacher_dict,
            &report.retained_indices,
            logit_temperature,
        )
    }

    pub fn n_samples(&self) -> usize {
        self.bundle.n_samples()
    }

    pub fn n_concepts(&self) -> usize {
        self.retained.len()
    }

    pub fn n_classes(&self) -> usize {
        self.bundle.n_classes()
    }

    /// `(view a rows, view b rows, teacher rows)` for a batch, cast to `T`.
    pub fn gather<T: Real>(&self, rows: &[usize], view_b: usize) -> (Array2<T>, Array2<T>, Array2<T>) {
        let pick = |m: &Array2<f64>| m.select(Axis(0), rows).mapv(T::of);
        (
            pick(&self.student_views[0]),
            pick(&self.student_views[view_b]),
            pick(&self.teacher),
        )
    }
}

/// Filters the dictionary on the teacher's canonical view and records which
/// inputs the report belongs to.
pub fn filter_teacher(
    teacher: &EmbeddingBundle,
    dictionary: &ConceptDictionary,
    logit_temperature: f64,
    beta_e: f64,
    beta_c: f64,
    mode: EigenMode,
) -> Result<SpectralReport> {
    let cm = cross_modal(teacher.view(TEACHER_VIEW), dictionary.embeddings().view(), logit_temperature)?;
    let mut report = spectral_filter(&cm, dictionary, beta_e, beta_c, mode)?;
    report.teacher_digest = Some(teacher.content_digest());
    report.dictionary_digest = Some(dictionary.content_digest());
    Ok(report)
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Also compute the silhouette of the normalized projections, `O(N²)`.
    pub silhouette: bool,
}

/// Scores `params` on the unlabeled samples using the canonical view.
pub fn evaluate<T: Real>(
    params: &HeadParameters<T>,
    data: &TrainingData,
    temperatures: &Temperatures,
    opts: EvalOptions,
) -> Result<EvalResult> {
    let rows = data.bundle.unlabeled_indices();
    if rows.is_empty() {
        return Err(invalid!("bundle has no unlabeled samples to evaluate"));
    }
    let d = params.dims.d_proj;
    let mut predictions = Vec::with_capacity(rows.len());
    let mut student = Array2::<f64>::zeros((rows.len(), data.n_concepts()));
    let mut projected = Array2::<f64>::zeros((if opts.silhouette { rows.len() } else { 0 }, d));
    for (c, chunk) in rows.chunks(EVAL_CHUNK).enumerate() {
        let start = c * EVAL_CHUNK;
        let z = data.student_views[0].select(Axis(0), chunk).mapv(T::of);
        let trace = params.forward(z.view(), temperatures.cls_student)?;
        predictions.extend(trace.predictions());
        student
            .slice_mut(s![start..start + chunk.len(), ..])
            .assign(&trace.z_tilde.mapv(|x| x.as_f64()));
        if opts.silhouette {
            projected
                .slice_mut(s![start..start + chunk.len(), ..])
                .assign(&trace.u_hat.mapv(|x| x.as_f64()));
        }
    }
    let labels: Vec<u32> = rows.iter().map(|&i| data.bundle.labels()[i]).collect();
    let acc = hungarian_accuracy(&predictions, &labels, data.bundle.old_classes(), data.n_classes())?;
    let teacher = data.teacher.select(Axis(0), &rows);
    let alignment = spearman_alignment(student.view(), teacher.view())?;
    let sil = if opts.silhouette {
        let distinct: BTreeSet<u32> = labels.iter().copied().collect();
        (distinct.len() >= 2)
            .then(|| silhouette(projected.view(), &labels))
            .transpose()?
    } else {
        None
    };
    Ok(EvalResult::new(acc, &alignment, sil))
}

/// Hard cluster assignments of the unlabeled samples.
pub fn predict<T: Real>(params: &HeadParameters<T>, data: &TrainingData, tau_cls: f64) -> Result<Vec<usize>> {
    let rows = data.bundle.unlabeled_indices();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let z = data.student_views[0].select(Axis(0), chunk).mapv(T::of);
        out.extend(params.forward(z.view(), tau_cls)?.predictions());
    }
    Ok(out)
}
