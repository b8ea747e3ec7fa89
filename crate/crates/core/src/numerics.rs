//! Dense real-matrix primitives.
//!
//! [`Matrix`] is a plain row-major `f64` buffer. Products go through
//! `matrixmultiply`'s GEMM with explicit strides, so transposed operands
//! never need to be materialized. On top of that sit the handful of
//! operations the dependency estimators need: the centering matrix `H`,
//! double centering `HKH`, the spectral norm by power iteration, and a
//! central-difference gradient checker that every hand-derived gradient in
//! the crate is tested against.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{BidoError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(BidoError::dim(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(BidoError::dim(format!(
                    "row {i} has length {} but row 0 has length {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.product(other, false, false)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.product(other, true, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        self.product(other, false, true)
    }

    fn product(&self, other: &Matrix, ta: bool, tb: bool) -> Result<Matrix> {
        let (m, k) = if ta {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k2, n) = if tb {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        if k != k2 {
            return Err(BidoError::dim(format!(
                "cannot multiply {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = Matrix::zeros(m, n);
        let (rsa, csa) = strides(self.cols, ta);
        let (rsb, csb) = strides(other.cols, tb);
        gemm(
            m, k, n, 1.0, &self.data, rsa, csa, &other.data, rsb, csb, 0.0, &mut out.data, n as isize, 1,
        );
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.row_iter().map(|row| dot(row, v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.row_iter().zip(v) {
            axpy(s, row, &mut out);
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(mut self, s: f64) -> Matrix {
        self.scale(s);
        self
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(BidoError::dim(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `self + selfᵀ` for square matrices.
    pub fn symmetrized_sum(&self) -> Matrix {
        debug_assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] + self[(c, r)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|r| (r + 1..self.cols).all(|c| (self[(r, c)] - self[(c, r)]).abs() <= tol))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `C ← α·A·B + β·C` on strided row/column layouts, `A` is `m×k`, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by dgemm lies inside the slices, checked
    // above from the shapes and strides; C does not alias A or B because it
    // is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorize.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `H = I − (1/n)·𝟙𝟙ᵀ`.
pub fn centering_matrix(n: usize) -> Matrix {
    let inv = 1.0 / n as f64;
    Matrix::from_fn(n, n, |r, c| if r == c { 1.0 - inv } else { -inv })
}

/// Double centering `HKH`, computed in O(n²) from row, column and grand means.
pub fn center_gram(k: &Matrix) -> Result<Matrix> {
    if !k.is_square() {
        return Err(BidoError::dim(format!(
            "centering needs a square matrix, got {}x{}",
            k.rows, k.cols
        )));
    }
    let n = k.rows;
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let inv = 1.0 / n as f64;
    let row_means: Vec<f64> = k.row_iter().map(|r| r.iter().sum::<f64>() * inv).collect();
    let mut col_means = vec![0.0; n];
    for row in k.row_iter() {
        axpy(inv, row, &mut col_means);
    }
    let grand = row_means.iter().sum::<f64>() * inv;
    Ok(Matrix::from_fn(n, n, |r, c| {
        k[(r, c)] - row_means[r] - col_means[c] + grand
    }))
}

/// Largest singular value with its singular vectors, `A·v = σ·u`.
#[derive(Debug, Clone)]
pub struct SingularPair {
    pub value: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub iterations: usize,
}

/// Relative tolerance on the `σ²` estimate between power-iteration steps.
pub const POWER_TOLERANCE: f64 = 1e-12;
/// Hard cap on power-iteration steps.
pub const POWER_MAX_ITERATIONS: usize = 10_000;

/// Deterministic start vector. Centered Gram products annihilate the
/// all-ones vector, so a plain `𝟙/√n` start would stall on exactly the
/// matrices this is used for.
fn start_vector(n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Top singular triplet of `a` by power iteration on `AᵀA`.
///
/// The iteration multiplies by `A` and `Aᵀ` in turn instead of forming
/// `AᵀA`. It stops once the relative change of the `σ²` estimate falls
/// under [`POWER_TOLERANCE`] and the right vector moved by less than its
/// square root, or after [`POWER_MAX_ITERATIONS`] steps. When the top
/// singular value is repeated the returned vectors are some element of the
/// top singular subspace.
pub fn top_singular_pair(a: &Matrix) -> Result<SingularPair> {
    if a.is_empty() {
        return Err(BidoError::dim("spectral norm of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(BidoError::Evaluation(
            "spectral norm of a matrix with non-finite entries".into(),
        ));
    }
    let (m, n) = a.shape();
    let mut v = start_vector(n);
    let mut av = a.mul_vec(&v);
    if norm(&av) == 0.0 {
        // Start vector in the null space: fall back to the heaviest column.
        let heaviest = (0..n)
            .map(|c| (c, (0..m).map(|r| a[(r, c)] * a[(r, c)]).sum::<f64>()))
            .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
        if heaviest.1 <= 0.0 {
            let mut left = vec![0.0; m];
            left[0] = 1.0;
            return Ok(SingularPair {
                value: 0.0,
                left,
                right: v,
                iterations: 0,
            });
        }
        v = vec![0.0; n];
        v[heaviest.0] = 1.0;
        av = a.mul_vec(&v);
    }

    let mut lambda = dot(&av, &av);
    let mut iterations = 0;
    while iterations < POWER_MAX_ITERATIONS {
        iterations += 1;
        let mut w = a.t_mul_vec(&av);
        let wn = norm(&w);
        if wn == 0.0 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let step: f64 = w
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        v = w;
        av = a.mul_vec(&v);
        let next = dot(&av, &av);
        let converged =
            (next - lambda).abs() <= POWER_TOLERANCE * next && step <= POWER_TOLERANCE.sqrt();
        lambda = next;
        if converged {
            break;
        }
    }
    let value = lambda.sqrt();
    let left = if value > 0.0 {
        av.iter().map(|x| x / value).collect()
    } else {
        let mut l = vec![0.0; m];
        l[0] = 1.0;
        l
    };
    Ok(SingularPair {
        value,
        left,
        right: v,
        iterations,
    })
}

/// Largest singular value `σ_max(A)`.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    top_singular_pair(a).map(|p| p.value)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub probe_count: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares a claimed gradient against central differences
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`, coordinate by coordinate.
///
/// The relative error of a coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F, G>(
    f: F,
    grad_f: G,
    probe: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradientCheckReport>
where
    F: Fn(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(BidoError::param(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    if probe.is_empty() {
        return Err(BidoError::dim("gradient check on an empty probe"));
    }
    let analytic = grad_f(probe);
    if analytic.len() != probe.len() {
        return Err(BidoError::dim(format!(
            "claimed gradient has {} entries for a {}-dimensional probe",
            analytic.len(),
            probe.len()
        )));
    }
    let mut x = probe.to_vec();
    let mut worst = (0, 0.0f64);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(BidoError::Evaluation(format!(
                "objective not finite while probing coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(BidoError::Evaluation(format!(
                "claimed gradient not finite at coordinate {i}"
            )));
        }
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err > worst.1 {
            worst = (i, err);
        }
    }
    Ok(GradientCheckReport {
        max_relative_error: worst.1,
        worst_index: worst.0,
        probe_count: probe.len(),
        tolerance,
        pass: worst.1 < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::jacobi_singular_values;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_symmetric(rng: &mut impl Rng, n: usize) -> Matrix {
        let a = random_matrix(rng, n, n);
        a.symmetrized_sum()
    }

    #[test]
    fn centering_small_cases() {
        assert_eq!(centering_matrix(1).as_slice(), &[0.0]);
        assert_eq!(centering_matrix(2).as_slice(), &[0.5, -0.5, -0.5, 0.5]);
        let h = centering_matrix(4);
        for s in h.mul_vec(&[1.0; 4]) {
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn center_gram_known_values() {
        let ones = Matrix::from_fn(3, 3, |_, _| 1.0);
        assert!(center_gram(&ones).unwrap().max_abs() < 1e-15);
        let c = center_gram(&Matrix::identity(2)).unwrap();
        assert_eq!(c.as_slice(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn center_gram_matches_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_symmetric(&mut rng, 5);
        let h = centering_matrix(5);
        let explicit = h.matmul(&k).unwrap().matmul(&h).unwrap();
        let fast = center_gram(&k).unwrap();
        assert!(fast.max_abs_diff(&explicit) < 1e-13);
        assert!(fast.is_symmetric(1e-14));
        for r in 0..5 {
            assert!(fast.row(r).iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn center_gram_rejects_rectangular() {
        assert!(matches!(
            center_gram(&Matrix::zeros(2, 3)),
            Err(BidoError::Dimension(_))
        ));
    }

    #[test]
    fn spectral_norm_known_values() {
        let d = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((spectral_norm(&d).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        assert!(matches!(
            spectral_norm(&Matrix::zeros(0, 0)),
            Err(BidoError::Dimension(_))
        ));
    }

    #[test]
    fn spectral_norm_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 8, 8);
            let oracle = jacobi_singular_values(&a)[0];
            let got = spectral_norm(&a).unwrap();
            assert!((got - oracle).abs() / oracle < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn singular_pair_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 6, 4);
        let p = top_singular_pair(&a).unwrap();
        let av = a.mul_vec(&p.right);
        for (x, u) in av.iter().zip(&p.left) {
            assert!((x - p.value * u).abs() < 1e-9);
        }
        let atu = a.t_mul_vec(&p.left);
        for (x, v) in atu.iter().zip(&p.right) {
            assert!((x - p.value * v).abs() < 1e-6);
        }
    }

    #[test]
    fn spectral_norm_of_centered_product() {
        // All-ones lies in the null space here; the start vector must cope.
        let k = center_gram(&Matrix::identity(2)).unwrap();
        let prod = k.matmul(&k).unwrap();
        assert!((spectral_norm(&prod).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_exact_cases() {
        let probe = [0.3, -1.2, 2.5];
        let r = finite_diff_check(
            |x| 0.5 * dot(x, x),
            |x| x.to_vec(),
            &probe,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.probe_count, 3);

        let r = finite_diff_check(|_| 4.0, |x| vec![0.0; x.len()], &probe, 1e-4, 1e-7).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn gradient_check_flags_wrong_gradient() {
        let r = finite_diff_check(
            |x| x[0] * x[0],
            |x| vec![x[0]],
            &[1.0],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_relative_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gradient_check_errors() {
        assert!(finite_diff_check(|x| x[0], |_| vec![1.0], &[0.0], 1.0, 1e-4).is_err());
        let r = finite_diff_check(|x| x[0].ln(), |_| vec![1.0], &[0.0], 1e-4, 1e-4);
        assert!(matches!(r, Err(BidoError::Evaluation(_))));
    }

    #[test]
    fn products_agree_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 4, 5);
        let atb = a.t_matmul(&b).unwrap();
        let explicit = a.transpose().matmul(&b).unwrap();
        assert!(atb.max_abs_diff(&explicit) < 1e-14);
        let c = random_matrix(&mut rng, 5, 3);
        let act = a.matmul_t(&c).unwrap();
        assert!(act.max_abs_diff(&a.matmul(&c.transpose()).unwrap()) < 1e-14);
        assert!(a.matmul(&b).is_err());
    }

    proptest! {
        #[test]
        fn centering_matrix_properties(n in 1usize..40) {
            let h = centering_matrix(n);
            prop_assert!(h.is_symmetric(1e-12));
            let hh = h.matmul(&h).unwrap();
            prop_assert!(hh.max_abs_diff(&h) < 1e-12);
            for s in h.mul_vec(&vec![1.0; n]) {
                prop_assert!(s.abs() < 1e-12);
            }
        }

        #[test]
        fn spectral_norm_transpose_invariant(seed in any::<u64>(), r in 1usize..32, c in 1usize..32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, r, c);
            let s1 = spectral_norm(&a).unwrap();
            let s2 = spectral_norm(&a.transpose()).unwrap();
            prop_assert!((s1 - s2).abs() <= 1e-9 * s1.max(s2));
        }

        #[test]
        fn spectral_norm_submultiplicative(seed in any::<u64>(), n in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, n);
            let b = random_matrix(&mut rng, n, n);
            let ab = spectral_norm(&a.matmul(&b).unwrap()).unwrap();
            let bound = spectral_norm(&a).unwrap() * spectral_norm(&b).unwrap();
            prop_assert!(ab <= bound * (1.0 + 1e-9));
        }

        #[test]
        fn center_gram_idempotent(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_symmetric(&mut rng, n);
            let once = center_gram(&k).unwrap();
            let twice = center_gram(&once).unwrap();
            prop_assert!(twice.max_abs_diff(&once) < 1e-10);
        }
    }
}
