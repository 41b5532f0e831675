//! Clustering accuracy and representation diagnostics.

mod assignment;

pub use assignment::{linear_assignment, max_weight_matching};

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, shape, Result};

/// Hungarian-matched accuracy on the unlabeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub acc_all: f64,
    pub acc_old: f64,
    /// Zero when no unlabeled sample belongs to a New class.
    pub acc_new: f64,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    /// `permutation[cluster]` is the ground-truth class that cluster maps to.
    pub permutation: Vec<u32>,
}

/// Clustering accuracy under the single best one-to-one map from predicted
/// clusters to classes, found on all instances and reused for the Old and New
/// subsets.
pub fn hungarian_accuracy(
    predictions: &[usize],
    labels: &[u32],
    old_classes: &BTreeSet<u32>,
    n_classes: usize,
) -> Result<Accuracy> {
    if predictions.len() != labels.len() {
        return Err(shape!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(invalid!("no instances to evaluate"));
    }
    if let Some(p) = predictions.iter().find(|&&p| p >= n_classes) {
        return Err(invalid!("prediction {p} outside {n_classes} classes"));
    }
    if let Some(y) = labels.iter().find(|&&y| y as usize >= n_classes) {
        return Err(invalid!("label {y} outside {n_classes} classes"));
    }
    let mut counts = vec![vec![0i64; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[p][y as usize] += 1;
    }
    let assignment = max_weight_matching(&counts);
    let permutation: Vec<u32> = assignment.iter().map(|&c| c as u32).collect();

    let (mut hit_old, mut hit_new, mut n_old, mut n_new) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        let hit = permutation[p] == y;
        if old_classes.contains(&y) {
            n_old += 1;
            hit_old += hit as usize;
        } else {
            n_new += 1;
            hit_new += hit as usize;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Accuracy {
        acc_all: ratio(hit_old + hit_new, predictions.len()),
        acc_old: ratio(hit_old, n_old),
        acc_new: ratio(hit_new, n_new),
        n_all: predictions.len(),
        n_old,
        n_new,
        permutation,
    })
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Two-sided p-value of a rank correlation over `n` points, from the usual
/// t approximation with `n - 2` degrees of freedom.
pub fn spearman_p_value(rho: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub mean: f64,
    /// Population standard deviation across samples.
    pub std: f64,
    /// Rows skipped because one side was constant.
    pub n_excluded: usize,
    pub rho: Vec<f64>,
    pub p_values: Vec<f64>,
}

/// Per-row Spearman correlation between student and teacher cross-modal
/// rows.
pub fn spearman_alignment(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>) -> Result<Alignment> {
    if student.dim() != teacher.dim() {
        return Err(shape!("student {:?} vs teacher {:?}", student.dim(), teacher.dim()));
    }
    let m = student.ncols();
    if m < 3 {
        return Err(invalid!("rank correlation needs at least 3 concepts, got {m}"));
    }
    let per_row: Vec<Option<f64>> = (0..student.nrows())
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> = student.row(i).to_vec();
            let t: Vec<f64> = teacher.row(i).to_vec();
            spearman(&s, &t)
        })
        .collect();
    let rho: Vec<f64> = per_row.iter().flatten().copied().collect();
    let n_excluded = per_row.len() - rho.len();
    if rho.is_empty() {
        return Err(invalid!("every row is constant; correlation undefined"));
    }
    let n = rho.len() as f64;
    let mean = rho.iter().sum::<f64>() / n;
    let std = (rho.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let p_values = rho.iter().map(|&r| spearman_p_value(r, m)).collect();
    Ok(Alignment {
        mean,
        std,
        n_excluded,
        rho,
        p_values,
    })
}

/// Mean silhouette coefficient under Euclidean distance. Members of
/// singleton clusters score 0.
pub fn silhouette(features: ArrayView2<'_, f64>, labels: &[u32]) -> Result<f64> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(shape!("{} labels for {n} rows", labels.len()));
    }
    let clusters: BTreeSet<u32> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(invalid!("silhouette needs at least two clusters"));
    }
    let index: Vec<usize> = labels
        .iter()
        .map(|y| clusters.iter().position(|c| c == y).unwrap())
        .collect();
    let k = clusters.len();
    let mut sizes = vec![0usize; k];
    for &c in &index {
        sizes[c] += 1;
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = index[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let xi = features.row(i);
            for j in 0..n {
                if j != i {
                    let d = xi
                        .iter()
                        .zip(features.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    sums[index[j]] += d;
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// New-class accuracy as a fraction of Old-class accuracy.
pub fn relative_accuracy(acc_old: f64, acc_new: f64) -> Result<f64> {
    if acc_old <= 0.0 {
        return Err(invalid!("relative accuracy undefined with zero Old accuracy"));
    }
    Ok(acc_new / acc_old)
}

/// Everything the `eval` command reports for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub n_unlabeled: usize,
    pub n_old: usize,
    pub n_new: usize,
    pub permutation: Vec<u32>,
    pub spearman_mean: f64,
    pub spearman_std: f64,
    pub spearman_excluded: usize,
    /// Silhouette of the projected embeddings under the ground-truth labels.
    pub silhouette: Option<f64>,
    pub relative_accuracy: Option<f64>,
}

impl EvalResult {
    pub fn new(acc: Accuracy, alignment: &Alignment, silhouette: Option<f64>) -> Self {
        let relative = relative_accuracy(acc.acc_old, acc.acc_new).ok().filter(|_| acc.n_new > 0);
        EvalResult {
            acc_all: acc.acc_all,
            acc_old: acc.acc_old,
            acc_new: acc.acc_new,
            n_unlabeled: acc.n_all,
            n_old: acc.n_old,
            n_new: acc.n_new,
            permutation: acc.permutation,
            spearman_mean: alignment.mean,
            spearman_std: alignment.std,
            spearman_excluded: alignment.n_excluded,
            silhouette,
            relative_accuracy: relative,
        }
    }
}

#[cfg(test)]
mod tests;
