//! Slow, independent reference computations.
//!
//! Nothing here shares code paths with the production estimators: the SVD
//! is a one-sided Jacobi sweep instead of power iteration, HSIC is a literal
//! quadruple sum over `Tr(KHLH)` with an explicit `H`, and the permutation
//! null is built by brute force. The self-test command and the test suites
//! check the fast paths against these.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numerics::{centering_matrix, Matrix};

/// All singular values of `a` in descending order, by one-sided Jacobi.
pub fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
    // Work on the orientation with at least as many rows as columns.
    let work = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = work.shape();
    // Column-major copy so column rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| work[(r, c)]).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut values: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// `Tr(K·H·L·H)/(N−1)²` as the entrywise sum `Σ K_ij H_jk L_kl H_li`.
pub fn hsic_quadruple_sum(k: &Matrix, l: &Matrix) -> f64 {
    let n = k.rows();
    let h = centering_matrix(n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kij = k[(i, j)];
            for kk in 0..n {
                let a = kij * h[(j, kk)];
                for ll in 0..n {
                    total += a * l[(kk, ll)] * h[(ll, i)];
                }
            }
        }
    }
    total / ((n - 1) * (n - 1)) as f64
}

/// `(1/N)·sqrt(σ_max(HKH·HLH))` with explicit centering products and a
/// Jacobi SVD.
pub fn coco_dense(k: &Matrix, l: &Matrix) -> f64 {
    let n = k.rows();
    let h = centering_matrix(n);
    let kc = h.matmul(k).and_then(|m| m.matmul(&h)).expect("square");
    let lc = h.matmul(l).and_then(|m| m.matmul(&h)).expect("square");
    let prod = kc.matmul(&lc).expect("square");
    let top = jacobi_singular_values(&prod)[0];
    top.max(0.0).sqrt() / n as f64
}

/// Permutes rows and columns of `m` by `perm`: `out[i][j] = m[perm[i]][perm[j]]`.
pub fn permute_gram(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(perm[r], perm[c])])
}

/// Null distribution of a dependency statistic under random relabeling of
/// the second sample: `draws` values of `stat(K, P·L·Pᵀ)`.
pub fn permutation_null<R: Rng + ?Sized>(
    k: &Matrix,
    l: &Matrix,
    draws: usize,
    rng: &mut R,
    stat: impl Fn(&Matrix, &Matrix) -> f64,
) -> Vec<f64> {
    let n = l.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    (0..draws)
        .map(|_| {
            perm.shuffle(rng);
            stat(k, &permute_gram(l, &perm))
        })
        .collect()
}

/// Empirical quantile with linear interpolation, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
