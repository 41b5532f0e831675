//! Symmetric eigensolvers: a dense full decomposition and a block subspace
//! iteration for the leading pairs of a covariance that is never materialized.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape, Error, Result};
use crate::seed;

/// Eigenvalues in non-increasing order with matching unit-norm columns.
///
/// Each column's largest-magnitude entry (first one on ties) is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpairs {
    pub values: Array1<f64>,
    /// `[dim, n_pairs]`
    pub vectors: Array2<f64>,
}

/// A symmetric linear map applied to blocks of column vectors.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

pub struct DenseOperator(pub DMatrix<f64>);

impl SymmetricOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.0 * x
    }
}

/// `G = Xcᵀ Xc / (N - 1)` for mean-centered rows `Xc`, applied without forming G.
pub struct CenteredCovariance {
    centered: DMatrix<f64>,
    mean: Array1<f64>,
    scale: f64,
}

impl CenteredCovariance {
    pub fn new(rows: ArrayView2<'_, f64>) -> Self {
        let (n, m) = rows.dim();
        let mut mean = Array1::<f64>::zeros(m);
        for r in rows.rows() {
            mean += &r;
        }
        mean /= n as f64;
        let centered = DMatrix::from_fn(n, m, |i, j| rows[[i, j]] - mean[j]);
        Self {
            centered,
            mean,
            scale: 1.0 / (n as f64 - 1.0),
        }
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    /// `trace(G)`, the sum of all eigenvalues.
    pub fn trace(&self) -> f64 {
        self.centered.iter().map(|x| x * x).sum::<f64>() * self.scale
    }

    #[cfg(test)]
    fn dense(&self) -> DMatrix<f64> {
        let g = self.centered.transpose() * &self.centered * self.scale;
        (&g + g.transpose()) * 0.5
    }
}

impl SymmetricOperator for CenteredCovariance {
    fn dim(&self) -> usize {
        self.centered.ncols()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.centered.tr_mul(&(&self.centered * x)) * self.scale
    }
}

const SYMMETRY_TOL: f64 = 1e-8;
const DENSE_EIG_EPS: f64 = 1e-15;
const DENSE_EIG_MAX_ITER: usize = 10_000;
const SUBSPACE_TOL: f64 = 1e-10;
const SUBSPACE_MAX_ITER: usize = 3000;
const SMALL_PROBLEM: usize = 64;

fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn sorted_pairs(values: &[f64], vectors: &DMatrix<f64>, take: usize) -> Eigenpairs {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(take);
    let dim = vectors.nrows();
    let mut out = Array2::<f64>::zeros((dim, order.len()));
    for (c, &src) in order.iter().enumerate() {
        let col = vectors.column(src);
        let norm = col.norm();
        let mut pivot = 0;
        for i in 1..dim {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 } / norm;
        for i in 0..dim {
            out[[i, c]] = col[i] * sign;
        }
    }
    Eigenpairs {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: out,
    }
}

fn dense_eigen(g: DMatrix<f64>, take: usize) -> Result<Eigenpairs> {
    let eig = SymmetricEigen::try_new(g, DENSE_EIG_EPS, DENSE_EIG_MAX_ITER).ok_or_else(|| {
        Error::Numerical(format!(
            "dense symmetric eigensolver did not converge in {DENSE_EIG_MAX_ITER} sweeps"
        ))
    })?;
    Ok(sorted_pairs(eig.eigenvalues.as_slice(), &eig.eigenvectors, take))
}

/// Eigendecomposition of a symmetric matrix. With `top_k`, only the leading
/// `top_k` pairs are computed, iteratively.
pub fn sym_eigendecompose(g: ArrayView2<'_, f64>, top_k: Option<usize>) -> Result<Eigenpairs> {
    let (m, c) = g.dim();
    if m != c {
        return Err(shape!("matrix is {m}x{c}, not square"));
    }
    if m == 0 {
        return Err(invalid!("empty matrix"));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("non-finite matrix entry"));
    }
    for i in 0..m {
        for j in 0..i {
            if (g[[i, j]] - g[[j, i]]).abs() > SYMMETRY_TOL {
                return Err(invalid!("matrix not symmetric at ({i}, {j})"));
            }
        }
    }
    let dense = to_nalgebra(g);
    match top_k {
        None => dense_eigen(dense, m),
        Some(k) => top_eigenpairs(&DenseOperator(dense), k),
    }
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Leading `k` eigenpairs by block subspace iteration with Rayleigh–Ritz
/// extraction. Converged when every wanted Ritz residual
/// `‖A x - θ x‖` is below `1e-10 · θ_1`.
pub fn top_eigenpairs(op: &dyn SymmetricOperator, k: usize) -> Result<Eigenpairs> {
    let m = op.dim();
    if k == 0 {
        return Err(invalid!("top_k must be positive"));
    }
    let k = k.min(m);
    let block = (k + (k / 2).max(10)).min(m);
    if block == m || m <= SMALL_PROBLEM {
        let dense = op.apply(&DMatrix::identity(m, m));
        let dense = (&dense + dense.transpose()) * 0.5;
        return dense_eigen(dense, k);
    }

    let mut rng = seed::rng(0, "subspace-iteration", m as u64);
    let start = DMatrix::from_fn(m, block, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(start);
    let mut worst = f64::INFINITY;
    for _ in 0..SUBSPACE_MAX_ITER {
        let y = op.apply(&q);
        let h = q.tr_mul(&y);
        let h = (&h + h.transpose()) * 0.5;
        let small = SymmetricEigen::try_new(h, DENSE_EIG_EPS, DENSE_EIG_MAX_ITER)
            .ok_or_else(|| Error::Numerical("Rayleigh-Ritz eigensolver failed".into()))?;
        let ritz = sorted_pairs(small.eigenvalues.as_slice(), &small.eigenvectors, block);
        let s = to_nalgebra(ritz.vectors.view());
        let x = &q * &s;
        let ax = &y * &s;
        let scale = ritz.values[0].abs().max(f64::MIN_POSITIVE);
        worst = (0..k)
            .map(|i| (ax.column(i) - x.column(i) * ritz.values[i]).norm())
            .fold(0.0, f64::max);
        if worst <= SUBSPACE_TOL * scale {
            let values: Vec<f64> = ritz.values.iter().take(k).copied().collect();
            return Ok(sorted_pairs(&values, &x.columns(0, k).into_owned(), k));
        }
        q = orthonormalize(ax);
    }
    Err(Error::Numerical(format!(
        "low-rank eigensolver did not converge after {SUBSPACE_MAX_ITER} iterations (residual {worst:.3e})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::Rng;

    #[test]
    fn diagonal() {
        let g = arr2(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.0]]);
        let e = sym_eigendecompose(g.view(), None).unwrap();
        assert_eq!(e.values.to_vec(), vec![3.0, 1.0, 0.0]);
        let expected = arr2(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        for (a, b) in e.vectors.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let e = sym_eigendecompose(arr2(&[[2.0, 1.0], [1.0, 2.0]]).view(), None).unwrap();
        assert_abs_diff_eq!(e.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], 1.0, epsilon = 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(e.vectors[[0, 0]], r, epsilon = 1e-12);
        assert_abs_diff_eq!(e.vectors[[1, 0]], r, epsilon = 1e-12);
        // tie in magnitude: first entry is the pivot
        assert_abs_diff_eq!(e.vectors[[0, 1]], r, epsilon = 1e-12);
        assert_abs_diff_eq!(e.vectors[[1, 1]], -r, epsilon = 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(sym_eigendecompose(arr2(&[[1.0, 2.0], [0.0, 1.0]]).view(), None).is_err());
    }

    fn random_psd(m: usize, rank: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seed::rng(seed, "psd", 0);
        let x = Array2::from_shape_fn((rank, m), |_| rng.random_range(-1.0..1.0));
        x.t().dot(&x)
    }

    #[test]
    fn residuals_small() {
        let g = random_psd(20, 30, 1);
        let e = sym_eigendecompose(g.view(), None).unwrap();
        for i in 0..20 {
            let v = e.vectors.column(i);
            let r = g.dot(&v) - &v * e.values[i];
            assert!(r.dot(&r).sqrt() < 1e-8);
        }
    }

    #[test]
    fn low_rank_matches_full() {
        let g = random_psd(150, 12, 3);
        let full = sym_eigendecompose(g.view(), None).unwrap();
        let part = sym_eigendecompose(g.view(), Some(8)).unwrap();
        assert_eq!(part.values.len(), 8);
        for i in 0..8 {
            assert_abs_diff_eq!(full.values[i], part.values[i], epsilon = 1e-8 * full.values[0]);
            for r in 0..150 {
                assert_abs_diff_eq!(full.vectors[[r, i]], part.vectors[[r, i]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn implicit_covariance_matches_dense() {
        let mut rng = crate::seed::rng(5, "rows", 0);
        let rows = Array2::from_shape_fn((40, 90), |_| rng.random_range(0.0..1.0));
        let op = CenteredCovariance::new(rows.view());
        let (g, mean) = super::super::cross_modal_covariance(rows.view()).unwrap();
        let dense = op.dense();
        for i in 0..90 {
            assert_abs_diff_eq!(mean[i], op.mean()[i], epsilon = 1e-14);
            for j in 0..90 {
                assert_abs_diff_eq!(g[[i, j]], dense[(i, j)], epsilon = 1e-13);
            }
        }
        let trace: f64 = (0..90).map(|i| g[[i, i]]).sum();
        assert_abs_diff_eq!(trace, op.trace(), epsilon = 1e-12);
    }
}
