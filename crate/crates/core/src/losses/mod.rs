//! Training objectives with hand-derived gradients.
//!
//! Every function returns the batch-mean loss together with its gradient with
//! respect to the inputs it is differentiable in. [`objective`] chains these
//! through the head.

mod objective;

pub(crate) use objective::weighted_value;

pub use objective::{
    total_loss, total_loss_weighted, BatchInputs, Component, ComponentWeights, KdMode, LossBreakdown,
    LossConfig, DEFAULT_EPSILON, DEFAULT_LAMBDA,
};

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{invalid, shape, Result};
use crate::real::Real;
use crate::representation::head::softmax;

fn log_softmax<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn scaled_gram<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, tau: f64) -> Array2<T> {
    a.dot(&b.t()).mapv(|s| s / T::of(tau))
}

fn check_same_shape<T>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape!("{what}: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Supervised contrastive loss over the labeled members of a batch.
///
/// Anchors are labeled samples with at least one other labeled sample of the
/// same class; positives are those samples; the denominator runs over every
/// other batch member, labeled or not. Returns zero (and a zero gradient) when
/// no anchor exists.
pub fn sup_contrastive<T: Real>(w: ArrayView2<'_, T>, labels: &[Option<u32>], tau: f64) -> Result<(T, Array2<T>)> {
    let b = w.nrows();
    if labels.len() != b {
        return Err(shape!("{} labels for {b} embeddings", labels.len()));
    }
    let positives: Vec<(usize, Vec<usize>)> = (0..b)
        .filter_map(|i| {
            let y = labels[i]?;
            let p: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == Some(y)).collect();
            (!p.is_empty()).then_some((i, p))
        })
        .collect();
    let mut grad = Array2::zeros(w.dim());
    if positives.is_empty() {
        return Ok((T::zero(), grad));
    }
    let s = scaled_gram(w, w, tau);
    let n_anchor = T::of(positives.len() as f64);
    let mut d_s = Array2::<T>::zeros((b, b));
    let mut loss = T::zero();
    for (i, pos) in &positives {
        let i = *i;
        let row = s.row(i);
        let max = (0..b).filter(|&j| j != i).map(|j| row[j]).fold(T::neg_infinity(), T::max);
        let denom: T = (0..b).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = denom.ln() + max;
        let n_pos = T::of(pos.len() as f64);
        let mean_pos = pos.iter().map(|&p| row[p]).sum::<T>() / n_pos;
        loss += lse - mean_pos;
        for j in (0..b).filter(|&j| j != i) {
            d_s[[i, j]] += (row[j] - lse).exp() / n_anchor;
        }
        for &p in pos {
            d_s[[i, p]] -= T::one() / (n_pos * n_anchor);
        }
    }
    let sym = &d_s + &d_s.t();
    grad.assign(&sym.dot(&w).mapv(|g| g / T::of(tau)));
    Ok((loss / n_anchor, grad))
}

/// InfoNCE in one direction: anchor `x_i`, positive `y_i`, negatives `x_j`
/// (`j != i`). Returns `(loss, d_x, d_y)`.
fn info_nce<T: Real>(x: ArrayView2<'_, T>, y: ArrayView2<'_, T>, tau: f64) -> (T, Array2<T>, Array2<T>) {
    let b = x.nrows();
    let bt = T::of(b as f64);
    let inv_tau = T::one() / T::of(tau);
    let s = scaled_gram(x, x, tau);
    let mut d_s = Array2::<T>::zeros((b, b));
    let mut d_pos = Array1::<T>::zeros(b);
    let mut loss = T::zero();
    for i in 0..b {
        let pos = x.row(i).dot(&y.row(i)) * inv_tau;
        let row = s.row(i);
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(pos, T::max);
        let denom = (pos - max).exp() + (0..b).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum::<T>();
        let lse = denom.ln() + max;
        loss += lse - pos;
        d_pos[i] = ((pos - lse).exp() - T::one()) / bt;
        for j in (0..b).filter(|&j| j != i) {
            d_s[[i, j]] = (row[j] - lse).exp() / bt;
        }
    }
    let sym = &d_s + &d_s.t();
    let pos_col = d_pos.insert_axis(Axis(1));
    let d_x = (sym.dot(&x) + &y * &pos_col).mapv(|g| g * inv_tau);
    let d_y = (&x * &pos_col).mapv(|g| g * inv_tau);
    (loss / bt, d_x, d_y)
}

/// Unsupervised contrastive loss with the second view as positive and the
/// other samples' first views as negatives. `symmetric` averages both
/// anchor directions.
pub fn unsup_contrastive<T: Real>(
    w: ArrayView2<'_, T>,
    w_prime: ArrayView2<'_, T>,
    tau: f64,
    symmetric: bool,
) -> Result<(T, Array2<T>, Array2<T>)> {
    check_same_shape(w, w_prime, "view shapes differ")?;
    if w.nrows() < 2 {
        return Err(invalid!("unsupervised contrastive loss needs at least 2 samples"));
    }
    let (l, dw, dwp) = info_nce(w, w_prime, tau);
    if !symmetric {
        return Ok((l, dw, dwp));
    }
    let (l2, dwp2, dw2) = info_nce(w_prime, w, tau);
    let half = T::of(0.5);
    Ok((
        (l + l2) * half,
        (dw + dw2).mapv(|g| g * half),
        (dwp + dwp2).mapv(|g| g * half),
    ))
}

/// Mean cross-entropy over `(row, class)` targets. Gradient is with respect to
/// the full logit matrix (zero on rows without a target).
pub fn sup_classification<T: Real>(logits: ArrayView2<'_, T>, targets: &[(usize, u32)]) -> Result<(T, Array2<T>)> {
    let (b, k) = logits.dim();
    let mut grad = Array2::zeros((b, k));
    if targets.is_empty() {
        return Ok((T::zero(), grad));
    }
    if let Some(&(r, y)) = targets.iter().find(|&&(r, y)| r >= b || y as usize >= k) {
        return Err(invalid!("target ({r}, {y}) outside {b}x{k} logits"));
    }
    let log_p = log_softmax(logits);
    let n = T::of(targets.len() as f64);
    let mut loss = T::zero();
    for &(r, y) in targets {
        loss -= log_p[[r, y as usize]];
        let mut g = grad.row_mut(r);
        g.zip_mut_with(&log_p.row(r), |g, &lp| *g += lp.exp() / n);
        g[y as usize] -= T::one() / n;
    }
    Ok((loss / n, grad))
}

/// Shannon entropy (natural log) of one distribution.
pub fn entropy<T: Real>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// Parts of the self-distillation objective, kept apart so each can be
/// weighted (and gradient-checked) independently.
#[derive(Debug, Clone)]
pub struct SelfDistill<T> {
    /// Cross-entropy of view-a predictions under sharpened view-b targets.
    pub cross_entropy: T,
    /// Entropy of the batch-mean prediction over both views.
    pub mean_entropy: T,
    pub d_ce_cos_a: Array2<T>,
    pub d_entropy_cos_a: Array2<T>,
    pub d_entropy_cos_b: Array2<T>,
}

impl<T: Real> SelfDistill<T> {
    pub fn loss(&self, epsilon: f64) -> T {
        self.cross_entropy - T::of(epsilon) * self.mean_entropy
    }

    /// Gradients of `cross_entropy - epsilon * mean_entropy` on both views'
    /// cosines.
    pub fn grads(&self, epsilon: f64) -> (Array2<T>, Array2<T>) {
        let e = T::of(epsilon);
        (
            &self.d_ce_cos_a - &self.d_entropy_cos_a.mapv(|g| g * e),
            self.d_entropy_cos_b.mapv(|g| -g * e),
        )
    }
}

fn softmax_backward<T: Real>(p: ArrayView2<'_, T>, d_p: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::zeros(p.dim());
    for ((mut o, pr), dr) in out.rows_mut().into_iter().zip(p.rows()).zip(d_p.rows()) {
        let dot = pr.dot(&dr);
        o.assign(&(&pr * &dr.mapv(|g| g - dot)));
    }
    out
}

/// Self-distillation between two views' classifier cosines.
///
/// `p = softmax(cos_a / tau_student)`, targets `softmax(cos_b / tau_sharp)`
/// receive no gradient, and the mean prediction averages both views at
/// `tau_student`.
pub fn self_distill_classification<T: Real>(
    cos_a: ArrayView2<'_, T>,
    cos_b: ArrayView2<'_, T>,
    tau_student: f64,
    tau_sharp: f64,
) -> Result<SelfDistill<T>> {
    self_distill_with_targets(cos_a, cos_b, cos_b, tau_student, tau_sharp)
}

/// Same as [`self_distill_classification`] with the sharpened targets taken
/// from `target_cos` instead of `cos_b`. Gradient checks use this to hold the
/// detached targets fixed while perturbing parameters.
pub(crate) fn self_distill_with_targets<T: Real>(
    cos_a: ArrayView2<'_, T>,
    cos_b: ArrayView2<'_, T>,
    target_cos: ArrayView2<'_, T>,
    tau_student: f64,
    tau_sharp: f64,
) -> Result<SelfDistill<T>> {
    check_same_shape(cos_a, cos_b, "view shapes differ")?;
    check_same_shape(cos_b, target_cos, "target shape differs")?;
    let (b, k) = cos_a.dim();
    if b == 0 {
        return Err(invalid!("empty batch"));
    }
    let bt = T::of(b as f64);
    let inv_s = T::one() / T::of(tau_student);
    let logits_a = cos_a.mapv(|c| c * inv_s);
    let logits_b = cos_b.mapv(|c| c * inv_s);
    let log_pa = log_softmax(logits_a.view());
    let pa = log_pa.mapv(T::exp);
    let pb = softmax(logits_b.view());
    let targets = softmax(target_cos.mapv(|c| c / T::of(tau_sharp)).view());

    let cross_entropy = -(&targets * &log_pa).sum() / bt;
    let d_ce_cos_a = (&pa - &targets).mapv(|g| g * inv_s / bt);

    let two_b = T::of(2.0) * bt;
    let mean = (pa.sum_axis(Axis(0)) + pb.sum_axis(Axis(0))).mapv(|x| x / two_b);
    let mean_entropy = entropy(mean.as_slice().unwrap());
    // dH/dp_i = -(ln pbar + 1) / 2B for every row of either view
    let tiny = T::min_positive_value();
    let d_mean: Array1<T> = mean.mapv(|x| -(x.max(tiny).ln() + T::one()) / two_b);
    let d_p = d_mean.broadcast((b, k)).unwrap().to_owned();
    let d_entropy_cos_a = softmax_backward(pa.view(), d_p.view()).mapv(|g| g * inv_s);
    let d_entropy_cos_b = softmax_backward(pb.view(), d_p.view()).mapv(|g| g * inv_s);
    Ok(SelfDistill {
        cross_entropy,
        mean_entropy,
        d_ce_cos_a,
        d_entropy_cos_a,
        d_entropy_cos_b,
    })
}

/// Batch-mean cross-entropy of the student softmax under teacher softmax
/// targets. Gradient is with respect to the student rows.
pub fn forward_kd<T: Real>(z_student: ArrayView2<'_, T>, z_teacher: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
    check_same_shape(z_student, z_teacher, "student and teacher concept sets differ")?;
    let bt = T::of(z_student.nrows() as f64);
    let log_s = log_softmax(z_student);
    let t = softmax(z_teacher);
    let loss = -(&t * &log_s).sum() / bt;
    let grad = (log_s.mapv(T::exp) - &t).mapv(|g| g / bt);
    Ok((loss, grad))
}

/// Batch-mean of `-Σ softmax(student) · log softmax(teacher)`.
pub fn reverse_kd<T: Real>(z_student: ArrayView2<'_, T>, z_teacher: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
    check_same_shape(z_student, z_teacher, "student and teacher concept sets differ")?;
    let bt = T::of(z_student.nrows() as f64);
    let s = softmax(z_student);
    let log_t = log_softmax(z_teacher);
    let loss = -(&s * &log_t).sum() / bt;
    let neg_log_t = log_t.mapv(|x| -x / bt);
    let grad = softmax_backward(s.view(), neg_log_t.view());
    Ok((loss, grad))
}
