//! Kernel functions and Gram matrices for inputs, latent batches and labels.
//!
//! Inputs and latent representations use a Gaussian kernel
//! `k(a, b) = exp(−‖a − b‖² / 2σ²)` with the bandwidth rule `σ = 5·√d`;
//! one-hot labels use the linear kernel, so `L_ij = 1` exactly when two
//! samples share a class.

use serde::{Deserialize, Serialize};

use crate::error::{BidoError, Result};
use crate::numerics::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Linear,
}

/// Which kernel to apply and, for Gaussian kernels, its bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDescriptor {
    pub kind: KernelKind,
    pub sigma: Option<f64>,
    pub input_dim: usize,
}

impl KernelDescriptor {
    pub fn gaussian(sigma: f64, input_dim: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(BidoError::param(format!(
                "gaussian bandwidth must be positive, got {sigma}"
            )));
        }
        Ok(KernelDescriptor {
            kind: KernelKind::Gaussian,
            sigma: Some(sigma),
            input_dim,
        })
    }

    /// Gaussian kernel with `σ = 5·√input_dim`.
    pub fn gaussian_default(input_dim: usize) -> Self {
        KernelDescriptor {
            kind: KernelKind::Gaussian,
            sigma: Some(default_sigma(input_dim)),
            input_dim,
        }
    }

    pub fn linear(input_dim: usize) -> Self {
        KernelDescriptor {
            kind: KernelKind::Linear,
            sigma: None,
            input_dim,
        }
    }

    /// Gram matrix of `samples` (one sample per row).
    pub fn gram(&self, samples: &Matrix) -> Result<GramMatrix> {
        if samples.cols() != self.input_dim {
            return Err(BidoError::dim(format!(
                "kernel expects {}-dimensional samples, got {}",
                self.input_dim,
                samples.cols()
            )));
        }
        match self.kind {
            KernelKind::Gaussian => {
                let sigma = self
                    .sigma
                    .ok_or_else(|| BidoError::param("gaussian kernel without sigma"))?;
                gaussian_gram(samples, sigma)
            }
            KernelKind::Linear => linear_gram(samples),
        }
    }
}

/// A square kernel matrix together with the kernel that produced it.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    matrix: Matrix,
    descriptor: KernelDescriptor,
}

impl GramMatrix {
    /// Wraps an arbitrary square symmetric matrix, e.g. for estimator tests.
    pub fn from_matrix(matrix: Matrix, descriptor: KernelDescriptor) -> Result<Self> {
        if !matrix.is_square() {
            return Err(BidoError::dim(format!(
                "Gram matrix must be square, got {:?}",
                matrix.shape()
            )));
        }
        Ok(GramMatrix { matrix, descriptor })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn descriptor(&self) -> &KernelDescriptor {
        &self.descriptor
    }

    pub fn sample_count(&self) -> usize {
        self.matrix.rows()
    }
}

/// `5·√dim`.
pub fn default_sigma(dim: usize) -> f64 {
    5.0 * (dim as f64).sqrt()
}

/// `K_ij = exp(−‖x_i − x_j‖² / 2σ²)`.
pub fn gaussian_gram(samples: &Matrix, sigma: f64) -> Result<GramMatrix> {
    let descriptor = KernelDescriptor::gaussian(sigma, samples.cols())?;
    let n = samples.rows();
    let scale = 1.0 / (2.0 * sigma * sigma);
    // ‖x_i − x_j‖² = ‖x_i‖² + ‖x_j‖² − 2⟨x_i, x_j⟩ with the inner products
    // from one gemm. Centering the columns first keeps the norms small, so
    // the cancellation costs little precision.
    let centered = center_columns(samples);
    let inner = centered.matmul_t(&centered)?;
    let sq: Vec<f64> = (0..n).map(|i| inner[(i, i)]).collect();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in i + 1..n {
            let d2 = sq[i] + sq[j] - 2.0 * inner[(i, j)];
            // Clamp rounding negatives; NaN from overflow must survive.
            let d2 = if d2 < 0.0 { 0.0 } else { d2 };
            let v = (-d2 * scale).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        matrix: k,
        descriptor,
    })
}

fn center_columns(samples: &Matrix) -> Matrix {
    let (n, d) = samples.shape();
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    Matrix::from_fn(n, d, |r, c| samples[(r, c)] - means[c])
}

/// `K_ij = ⟨x_i, x_j⟩`.
pub fn linear_gram(samples: &Matrix) -> Result<GramMatrix> {
    let n = samples.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        let xi = samples.row(i);
        for j in i..n {
            let v = dot(xi, samples.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        matrix: k,
        descriptor: KernelDescriptor::linear(samples.cols()),
    })
}

/// Gradient of `Σ_ij U_ij·K_ij` with respect to every sample.
///
/// `upstream` is `U`; it need not be symmetric. Returns one row per sample.
pub fn gram_gradient_wrt_samples(
    gram: &GramMatrix,
    samples: &Matrix,
    upstream: &Matrix,
) -> Result<Matrix> {
    let n = gram.sample_count();
    if upstream.shape() != (n, n) {
        return Err(BidoError::dim(format!(
            "upstream gradient {:?} does not match {n}x{n} Gram matrix",
            upstream.shape()
        )));
    }
    if samples.rows() != n || samples.cols() != gram.descriptor.input_dim {
        return Err(BidoError::dim(format!(
            "samples {:?} do not match Gram matrix over {n} samples of dim {}",
            samples.shape(),
            gram.descriptor.input_dim
        )));
    }
    let weights = upstream.symmetrized_sum();
    match gram.descriptor.kind {
        KernelKind::Linear => weights.matmul(samples),
        KernelKind::Gaussian => {
            let sigma = gram.descriptor.sigma.expect("gaussian descriptor has sigma");
            let inv_s2 = 1.0 / (sigma * sigma);
            // ∂K_ij/∂x_i = K_ij (x_j − x_i)/σ², so
            // g_i = Σ_j W_ij K_ij (x_j − x_i)/σ² with W = U + Uᵀ.
            let mut w = weights;
            for (wv, kv) in w.as_mut_slice().iter_mut().zip(gram.matrix.as_slice()) {
                *wv *= kv * inv_s2;
            }
            let mut g = w.matmul(samples)?;
            for i in 0..n {
                let row_sum: f64 = w.row(i).iter().sum();
                let xi = samples.row(i).to_vec();
                for (gv, xv) in g.row_mut(i).iter_mut().zip(&xi) {
                    *gv -= row_sum * xv;
                }
            }
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_sigma_rule() {
        assert_eq!(default_sigma(1), 5.0);
        assert_eq!(default_sigma(4), 10.0);
        assert_eq!(default_sigma(784), 140.0);
    }

    #[test]
    fn gaussian_known_values() {
        let same = Matrix::from_rows(&[[0.3, 0.2], [0.3, 0.2]]).unwrap();
        let k = gaussian_gram(&same, 1.5).unwrap();
        assert_eq!(k.matrix().as_slice(), &[1.0; 4]);

        let sigma = 0.7;
        let pts = Matrix::from_rows(&[[0.0], [sigma * 2f64.sqrt()]]).unwrap();
        let k = gaussian_gram(&pts, sigma).unwrap();
        assert!((k.matrix()[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!((k.matrix()[(0, 1)] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn gaussian_non_finite_samples_are_not_masked() {
        let far = Matrix::from_rows(&[[1e200, 0.0], [-1e200, 1.0]]).unwrap();
        assert_eq!(gaussian_gram(&far, 1.0).unwrap().matrix()[(0, 1)], 0.0);
        let nan = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(gaussian_gram(&nan, 1.0).unwrap().matrix()[(0, 1)].is_nan());
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        let pts = Matrix::zeros(2, 2);
        assert!(matches!(gaussian_gram(&pts, 0.0), Err(BidoError::Parameter(_))));
        assert!(matches!(gaussian_gram(&pts, -1.0), Err(BidoError::Parameter(_))));
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn descriptor_checks_dimension() {
        let d = KernelDescriptor::gaussian_default(3);
        assert!(matches!(d.gram(&Matrix::zeros(4, 2)), Err(BidoError::Dimension(_))));
    }

    #[test]
    fn linear_known_values() {
        let onehot = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = linear_gram(&onehot).unwrap();
        assert_eq!(l.matrix()[(0, 1)], 1.0);
        assert_eq!(l.matrix()[(0, 2)], 0.0);
        let pts = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        assert_eq!(linear_gram(&pts).unwrap().matrix()[(0, 1)], 1.0);
        let zeros = linear_gram(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(zeros.matrix().max_abs(), 0.0);
    }

    #[test]
    fn gradient_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        let g = gaussian_gram(&x, 0.8).unwrap();
        let zero = gram_gradient_wrt_samples(&g, &x, &Matrix::zeros(4, 4)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let same = Matrix::from_fn(4, 3, |_, c| c as f64);
        let g = gaussian_gram(&same, 0.8).unwrap();
        let up = random(&mut rng, 4, 4);
        assert_eq!(gram_gradient_wrt_samples(&g, &same, &up).unwrap().max_abs(), 0.0);

        assert!(gram_gradient_wrt_samples(&g, &same, &Matrix::zeros(3, 3)).is_err());
    }

    fn check_gradient(kind: KernelKind, seed: u64, n: usize, d: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, n, d);
        let up = random(&mut rng, n, n);
        let desc = match kind {
            KernelKind::Gaussian => KernelDescriptor::gaussian(0.9, d).unwrap(),
            KernelKind::Linear => KernelDescriptor::linear(d),
        };
        let objective = |flat: &[f64]| {
            let m = Matrix::from_vec(n, d, flat.to_vec()).unwrap();
            let k = desc.gram(&m).unwrap();
            k.matrix()
                .as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let report = finite_diff_check(
            objective,
            |flat| {
                let m = Matrix::from_vec(n, d, flat.to_vec()).unwrap();
                let k = desc.gram(&m).unwrap();
                gram_gradient_wrt_samples(&k, &m, &up).unwrap().into_vec()
            },
            x.as_slice(),
            1e-5,
            1e-5,
        )
        .unwrap();
        report.max_relative_error
    }

    #[test]
    fn gradient_matches_finite_differences_four_samples() {
        assert!(check_gradient(KernelKind::Gaussian, 17, 4, 3) < 1e-5);
        assert!(check_gradient(KernelKind::Linear, 17, 4, 3) < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gaussian_gram_properties(seed in any::<u64>(), n in 1usize..10, d in 1usize..6, sigma in 0.1f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, n, d);
            let k = gaussian_gram(&x, sigma).unwrap();
            prop_assert!(k.matrix().is_symmetric(1e-12));
            for i in 0..n {
                prop_assert_eq!(k.matrix()[(i, i)], 1.0);
                for j in 0..n {
                    let v = k.matrix()[(i, j)];
                    prop_assert!(v > 0.0 && v <= 1.0);
                }
            }
            // Joint rescaling of samples and bandwidth.
            let s = rng.random_range(0.2..5.0);
            let scaled = x.clone().scaled(s);
            let k2 = gaussian_gram(&scaled, sigma * s).unwrap();
            prop_assert!(k2.matrix().max_abs_diff(k.matrix()) < 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>(), n in 2usize..=8, d in 1usize..=6) {
            prop_assert!(check_gradient(KernelKind::Gaussian, seed, n, d) < 1e-5);
            prop_assert!(check_gradient(KernelKind::Linear, seed, n, d) < 1e-5);
        }
    }
}
