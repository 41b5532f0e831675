//! Spectral concept filtering.
//!
//! Teacher cross-modal rows are softmaxed, their sample covariance over
//! concepts is eigendecomposed, the leading eigenpairs covering a `beta_e`
//! share of the variance are kept, and each concept is scored by
//! `s_j = sum_i lambda_i * v_ij^2`. The highest-scoring concepts covering a
//! `beta_c` share of the total score form the filtered dictionary.

mod eigen;
mod report;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

pub use eigen::{sym_eigendecompose, top_eigenpairs, CenteredCovariance, DenseOperator, Eigenpairs, SymmetricOperator};
pub use report::{load_report, save_report, ReportManifest, SpectralReport, REPORT_MAGIC};

use crate::dataset::ConceptDictionary;
use crate::error::{invalid, shape, Error, Result};

pub const DEFAULT_BETA_E: f64 = 0.95;
pub const DEFAULT_BETA_C: f64 = 0.99;
/// Dictionaries larger than this use the low-rank eigensolver unless told otherwise.
pub const LOW_RANK_THRESHOLD: usize = 8192;
pub const DEFAULT_LOW_RANK_K: usize = 2048;

/// Temperature-scaled image–concept cosine similarities and their row softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalMatrix {
    /// `[n_samples, n_concepts]`, entries `cos / temperature`.
    pub raw: Array2<f64>,
    /// Row softmax of `raw`.
    pub normalized: Array2<f64>,
    pub temperature: f64,
}

impl CrossModalMatrix {
    pub fn from_raw(raw: Array2<f64>, temperature: f64) -> Result<Self> {
        let normalized = softmax_rows(raw.view())?;
        Ok(Self {
            raw,
            normalized,
            temperature,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.raw.nrows()
    }
    pub fn n_concepts(&self) -> usize {
        self.raw.ncols()
    }

    pub fn select_concepts(&self, indices: &[usize]) -> Result<Self> {
        Self::from_raw(self.raw.select(Axis(1), indices), self.temperature)
    }

    pub fn select_samples(&self, rows: &[usize]) -> Self {
        Self {
            raw: self.raw.select(Axis(0), rows),
            normalized: self.normalized.select(Axis(0), rows),
            temperature: self.temperature,
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if raw.iter().any(|x| x.is_nan()) {
        return Err(invalid!("NaN in softmax input"));
    }
    let mut out = raw.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

const COV_CHUNK: usize = 256;

fn column_mean(q: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut mean = Array1::zeros(q.ncols());
    for row in q.rows() {
        mean += &row;
    }
    mean / q.nrows() as f64
}

/// Sample covariance over concepts with divisor `N - 1`, plus the mean row.
///
/// The Gram sum is reduced over fixed 256-row chunks in chunk order, so the
/// result does not depend on the thread count.
pub fn cross_modal_covariance(normalized: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, m) = normalized.dim();
    if n < 2 {
        return Err(invalid!("covariance needs at least 2 samples, got {n}"));
    }
    let mean = column_mean(normalized);
    let starts: Vec<usize> = (0..n).step_by(COV_CHUNK).collect();
    let partials: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&s| {
            let block = normalized.slice(ndarray::s![s..(s + COV_CHUNK).min(n), ..]);
            let centered = &block - &mean;
            centered.t().dot(&centered)
        })
        .collect();
    let mut g = Array2::<f64>::zeros((m, m));
    for p in &partials {
        g += p;
    }
    g /= (n - 1) as f64;
    let sym = (&g + &g.t()) * 0.5;
    Ok((sym, mean))
}

/// `r_k` for `k = 1..=len`, relative to `total` (the full trace).
pub fn explained_variance_ratio(eigenvalues: ArrayView1<'_, f64>, total: f64) -> Vec<f64> {
    let mut acc = 0.0;
    eigenvalues
        .iter()
        .map(|&l| {
            acc += l;
            acc / total
        })
        .collect()
}

/// Smallest `k` with `r_k >= beta_e` over a full spectrum.
pub fn select_rank(eigenvalues: ArrayView1<'_, f64>, beta_e: f64) -> Result<usize> {
    select_rank_with_total(eigenvalues, eigenvalues.sum(), beta_e)
}

/// As [`select_rank`], for a possibly truncated spectrum whose full sum is
/// `total`. Returns the number of available pairs if none reaches `beta_e`.
pub fn select_rank_with_total(eigenvalues: ArrayView1<'_, f64>, total: f64, beta_e: f64) -> Result<usize> {
    check_threshold("beta_e", beta_e)?;
    if eigenvalues.is_empty() {
        return Err(invalid!("empty spectrum"));
    }
    if !(total > 0.0) {
        return Err(Error::Numerical("all-zero spectrum: no variance to explain".into()));
    }
    let ratios = explained_variance_ratio(eigenvalues, total);
    Ok(ratios
        .iter()
        .position(|&r| r >= beta_e)
        .map_or(ratios.len(), |p| p + 1))
}

/// `s_j = sum_i lambda_i * v_ij^2` over the given (retained) pairs.
///
/// Negative eigenvalues (rounding noise of a PSD matrix) contribute nothing.
pub fn concept_importance(eigenvalues: ArrayView1<'_, f64>, eigenvectors: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if eigenvalues.len() != eigenvectors.ncols() {
        return Err(shape!(
            "{} eigenvalues but {} eigenvector columns",
            eigenvalues.len(),
            eigenvectors.ncols()
        ));
    }
    let mut s = Array1::zeros(eigenvectors.nrows());
    for (v, &l) in eigenvectors.columns().into_iter().zip(eigenvalues) {
        let l = l.max(0.0);
        s.zip_mut_with(&v, |acc, &x| *acc += l * x * x);
    }
    Ok(s)
}

/// Indices sorted by descending importance (ties by ascending index), cut at
/// the shortest prefix whose share of the total reaches `beta_c`.
pub fn select_concepts(importance: ArrayView1<'_, f64>, beta_c: f64) -> Result<Vec<usize>> {
    check_threshold("beta_c", beta_c)?;
    let total: f64 = importance.sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("importance vector sums to zero".into()));
    }
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut keep = order.len();
    for (p, &j) in order.iter().enumerate() {
        acc += importance[j];
        if acc / total >= beta_c {
            keep = p + 1;
            break;
        }
    }
    order.truncate(keep.max(1));
    Ok(order)
}

/// [`select_concepts`] applied to a dictionary: returns the retained indices
/// and the restricted dictionary in retained order.
pub fn filter_dictionary(
    importance: ArrayView1<'_, f64>,
    dictionary: &ConceptDictionary,
    beta_c: f64,
) -> Result<(Vec<usize>, ConceptDictionary)> {
    if importance.len() != dictionary.len() {
        return Err(shape!(
            "importance has {} entries, dictionary {} concepts",
            importance.len(),
            dictionary.len()
        ));
    }
    let retained = select_concepts(importance, beta_c)?;
    let filtered = dictionary.subset(&retained)?;
    Ok((retained, filtered))
}

fn check_threshold(name: &str, beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(invalid!("{name} must lie in (0, 1), got {beta}"))
    }
}

/// Which eigensolver to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMode {
    /// Full decomposition up to [`LOW_RANK_THRESHOLD`] concepts, low-rank above.
    #[default]
    Auto,
    Full,
    /// Leading `k` pairs from the implicit covariance, `O(M k)` memory.
    LowRank(usize),
}

impl EigenMode {
    pub fn from_top_k(top_k: Option<usize>) -> Self {
        top_k.map_or(EigenMode::Auto, EigenMode::LowRank)
    }

    fn resolve(self, m: usize) -> Option<usize> {
        match self {
            EigenMode::Auto if m > LOW_RANK_THRESHOLD => Some(DEFAULT_LOW_RANK_K.min(m)),
            EigenMode::Auto | EigenMode::Full => None,
            EigenMode::LowRank(k) => Some(k.min(m)),
        }
    }
}

/// Full filtering pass over teacher cross-modal rows (all samples, labeled and
/// unlabeled).
pub fn spectral_filter(
    teacher: &CrossModalMatrix,
    dictionary: &ConceptDictionary,
    beta_e: f64,
    beta_c: f64,
    mode: EigenMode,
) -> Result<SpectralReport> {
    check_threshold("beta_e", beta_e)?;
    check_threshold("beta_c", beta_c)?;
    let (n, m) = teacher.normalized.dim();
    if m != dictionary.len() {
        return Err(shape!("cross-modal matrix has {m} concepts, dictionary {}", dictionary.len()));
    }
    if n < 2 {
        return Err(invalid!("covariance needs at least 2 samples, got {n}"));
    }
    let q = teacher.normalized.view();
    let top_k = mode.resolve(m);
    let (mean, pairs, total) = match top_k {
        None => {
            let (g, mean) = cross_modal_covariance(q)?;
            let pairs = sym_eigendecompose(g.view(), None)?;
            let total = pairs.values.sum();
            (mean, pairs, total)
        }
        Some(k) => {
            let op = CenteredCovariance::new(q);
            let total = op.trace();
            let pairs = top_eigenpairs(&op, k)?;
            (op.mean().clone(), pairs, total)
        }
    };
    let k_star = select_rank_with_total(pairs.values.view(), total, beta_e)?;
    let kept_values = pairs.values.slice(ndarray::s![..k_star]);
    let kept_vectors = pairs.vectors.slice(ndarray::s![.., ..k_star]);
    let importance = concept_importance(kept_values, kept_vectors)?;
    let retained = select_concepts(importance.view(), beta_c)?;
    Ok(SpectralReport {
        mean,
        eigenvalues: pairs.values,
        eigenvectors: Some(kept_vectors.to_owned()),
        total_variance: total,
        k_star,
        importance,
        retained_indices: retained,
        beta_e,
        beta_c,
        top_k,
        n_samples: n,
        teacher_digest: None,
        dictionary_digest: None,
    })
}
