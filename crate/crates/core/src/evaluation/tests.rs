use super::*;
use approx::assert_abs_diff_eq;
use ndarray::{arr2, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_best(weights: &[Vec<i64>]) -> i64 {
    permutations(weights.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &c)| weights[r][c]).sum())
        .max()
        .unwrap()
}

#[test]
fn assignment_matches_exhaustive_search() {
    let mut rng = crate::seed::rng(1, "hungarian", 0);
    for _ in 0..200 {
        let k = rng.random_range(1..=6);
        let w: Vec<Vec<i64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..20)).collect()).collect();
        let a = max_weight_matching(&w);
        let mut seen = a.clone();
        seen.sort();
        assert_eq!(seen, (0..k).collect::<Vec<_>>());
        let got: i64 = a.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
        assert_eq!(got, brute_force_best(&w));
    }
}

#[test]
fn six_sample_hand_case() {
    // clusters 0,1,2 vs classes: best map 0->1, 1->2, 2->0 gets 5 of 6
    let preds = [0, 0, 1, 1, 2, 2];
    let labels = [1, 1, 2, 0, 0, 0];
    let old: BTreeSet<u32> = [0, 1].into();
    let acc = hungarian_accuracy(&preds, &labels, &old, 3).unwrap();
    let mut counts = vec![vec![0i64; 3]; 3];
    for (&p, &y) in preds.iter().zip(&labels) {
        counts[p][y as usize] += 1;
    }
    assert_eq!(brute_force_best(&counts), 5);
    assert_abs_diff_eq!(acc.acc_all, 5.0 / 6.0);
    assert_eq!(acc.permutation, vec![1, 2, 0]);
    // old = labels 0 and 1 (5 samples, 4 hit), new = label 2 (1 sample, 1 hit)
    assert_eq!((acc.n_old, acc.n_new), (5, 1));
    assert_abs_diff_eq!(acc.acc_old, 0.8);
    assert_abs_diff_eq!(acc.acc_new, 1.0);
}

#[test]
fn accuracy_perfect_and_permuted() {
    let labels: Vec<u32> = (0..40).map(|i| i % 5).collect();
    let old: BTreeSet<u32> = [0, 1].into();
    let preds: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let acc = hungarian_accuracy(&preds, &labels, &old, 5).unwrap();
    assert_eq!((acc.acc_all, acc.acc_old, acc.acc_new), (1.0, 1.0, 1.0));
    let perm = [3, 0, 4, 1, 2];
    let shuffled: Vec<usize> = labels.iter().map(|&y| perm[y as usize]).collect();
    assert_eq!(hungarian_accuracy(&shuffled, &labels, &old, 5).unwrap().acc_all, 1.0);
    assert!(hungarian_accuracy(&[5], &[0], &old, 5).is_err());
    assert!(hungarian_accuracy(&[0, 1], &[0], &old, 5).is_err());
}

#[test]
fn decomposition_identity_and_invariance() {
    let mut rng = crate::seed::rng(2, "eval", 0);
    for _ in 0..50 {
        let k = 6;
        let n = 60;
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let old: BTreeSet<u32> = [0, 2, 4].into();
        let acc = hungarian_accuracy(&preds, &labels, &old, k).unwrap();
        let recomposed = (acc.n_old as f64 * acc.acc_old + acc.n_new as f64 * acc.acc_new) / n as f64;
        assert_abs_diff_eq!(acc.acc_all, recomposed, epsilon = 1e-15);

        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        assert_eq!(hungarian_accuracy(&relabeled, &labels, &old, k).unwrap().acc_all, acc.acc_all);
        // ground-truth relabeling too (old set follows the classes)
        let lperm: Vec<u32> = perm.iter().map(|&p| p as u32).collect();
        let labels2: Vec<u32> = labels.iter().map(|&y| lperm[y as usize]).collect();
        assert_eq!(hungarian_accuracy(&preds, &labels2, &old, k).unwrap().acc_all, acc.acc_all);

        // no fixed permutation does better
        for p in permutations(k).iter().step_by(37) {
            let hits = preds.iter().zip(&labels).filter(|(&q, &y)| p[q] == y as usize).count();
            assert!(hits as f64 / n as f64 <= acc.acc_all);
        }
    }
}

fn oracle_rank(x: &[f64], i: usize) -> f64 {
    let less = x.iter().filter(|&&v| v < x[i]).count() as f64;
    let equal = x.iter().filter(|&&v| v == x[i]).count() as f64;
    less + (equal + 1.0) / 2.0
}

#[test]
fn spearman_with_tie_matches_direct_ranks() {
    let x = [1.0, 2.0, 2.0, 3.0, 5.0];
    let y = [5.0, 6.0, 7.0, 8.0, 7.0];
    let rx: Vec<f64> = (0..5).map(|i| oracle_rank(&x, i)).collect();
    let ry: Vec<f64> = (0..5).map(|i| oracle_rank(&y, i)).collect();
    assert_eq!(rx, vec![1.0, 2.5, 2.5, 4.0, 5.0]);
    assert_eq!(average_ranks(&x), rx);
    let m = 3.0;
    let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let den = (rx.iter().map(|a| (a - m).powi(2)).sum::<f64>() * ry.iter().map(|b| (b - m).powi(2)).sum::<f64>()).sqrt();
    assert_abs_diff_eq!(spearman(&x, &y).unwrap(), num / den, epsilon = 1e-15);
}

#[test]
fn spearman_limits() {
    let x = [0.3, -1.0, 2.0, 0.7, 5.0];
    let mono: Vec<f64> = x.iter().map(|v: &f64| v.exp() * 3.0 + 1.0).collect();
    assert_abs_diff_eq!(spearman(&x, &x).unwrap(), 1.0);
    assert_abs_diff_eq!(spearman(&x, &mono).unwrap(), 1.0);
    let rev: Vec<f64> = x.iter().map(|v| -v * v * v).collect();
    assert_abs_diff_eq!(spearman(&x, &rev).unwrap(), -1.0);
    assert!(spearman(&x, &[1.0; 5]).is_none());
    assert_eq!(spearman_p_value(1.0, 10), 0.0);
    let p = spearman_p_value(0.0, 10);
    assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
}

#[test]
fn alignment_counts_constant_rows() {
    let t = arr2(&[[1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0], [1.0, 1.0, 1.0, 1.0]]);
    let s = arr2(&[[2.0, 4.0, 6.0, 8.0], [1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 2.0, 3.0]]);
    let a = spearman_alignment(s.view(), t.view()).unwrap();
    assert_eq!(a.n_excluded, 1);
    assert_eq!(a.rho, vec![1.0, -1.0]);
    assert_abs_diff_eq!(a.mean, 0.0);
    assert_abs_diff_eq!(a.std, 1.0);
    assert!(spearman_alignment(s.slice(ndarray::s![.., ..2]), t.slice(ndarray::s![.., ..2])).is_err());
}

#[test]
fn silhouette_hand_case() {
    let x = arr2(&[[0.0], [1.0], [4.0], [5.0]]);
    let s = silhouette(x.view(), &[0, 0, 1, 1]).unwrap();
    assert_abs_diff_eq!(s, 47.0 / 63.0, epsilon = 1e-15);
    assert!(silhouette(x.view(), &[0, 0, 0, 0]).is_err());
    // singleton clusters contribute zero
    let s = silhouette(x.view(), &[0, 0, 1, 2]).unwrap();
    let a0 = (4.0 - 1.0) / 4.0;
    let a1 = (3.0 - 1.0) / 3.0;
    assert_abs_diff_eq!(s, (a0 + a1) / 4.0, epsilon = 1e-15);
}

#[test]
fn silhouette_separated_masses_and_shuffle() {
    let mut rng = crate::seed::rng(3, "silhouette", 0);
    let n = 100;
    let x = Array2::from_shape_fn((n, 3), |(i, _)| if i < n / 2 { 0.0 } else { 100.0 } + rng.random_range(-0.01..0.01));
    let labels: Vec<u32> = (0..n).map(|i| (i >= n / 2) as u32).collect();
    assert!(silhouette(x.view(), &labels).unwrap() > 0.99);
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    assert!(silhouette(x.view(), &shuffled).unwrap() < 0.1);
}

#[test]
fn relative_accuracy_cases() {
    assert_abs_diff_eq!(relative_accuracy(0.8, 0.8).unwrap(), 1.0);
    assert_abs_diff_eq!(relative_accuracy(0.926, 0.874).unwrap(), 0.944, epsilon = 5e-4);
    assert_eq!(relative_accuracy(0.5, 0.0).unwrap(), 0.0);
    assert!(relative_accuracy(0.0, 0.5).is_err());
}
