//! Empirical kernel dependency measures and their gradients.
//!
//! Two estimators over a batch of `N` paired samples with Gram matrices
//! `K` and `L` and centered forms `K̃ = HKH`, `L̃ = HLH`:
//!
//! * constrained covariance, `COCO = (1/N)·sqrt(‖K̃·L̃‖₂)` with the spectral norm;
//! * the biased Hilbert-Schmidt independence criterion,
//!   `HSIC = Tr(K·H·L·H)/(N−1)²`.
//!
//! Both are symmetric in their two arguments, so a single gradient routine
//! serves `d(X, Z)` and `d(Z, Y)` alike: the latent Gram matrix is always
//! differentiated and the other one is held fixed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BidoError, Result};
use crate::kernels::{gram_gradient_wrt_samples, KernelDescriptor, GramMatrix};
use crate::numerics::{center_gram, top_singular_pair, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Coco,
    Hsic,
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Measure::Coco => "coco",
            Measure::Hsic => "hsic",
        })
    }
}

/// How to build a kernel for a batch whose dimension is only known at run
/// time (latent taps differ in width).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelRule {
    /// Gaussian kernel; `sigma: null` applies the `5·√d` rule.
    Gaussian {
        #[serde(default)]
        sigma: Option<f64>,
    },
    Linear,
}

impl KernelRule {
    pub fn descriptor(&self, dim: usize) -> Result<KernelDescriptor> {
        match *self {
            KernelRule::Gaussian { sigma: None } => Ok(KernelDescriptor::gaussian_default(dim)),
            KernelRule::Gaussian { sigma: Some(s) } => KernelDescriptor::gaussian(s, dim),
            KernelRule::Linear => Ok(KernelDescriptor::linear(dim)),
        }
    }
}

/// The dependency measure `d` together with the kernels for inputs `X`,
/// labels `Y` and latent representations `Z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencyMeasureConfig {
    pub measure: Measure,
    #[serde(default = "gaussian_rule")]
    pub kernel_x: KernelRule,
    #[serde(default = "linear_rule")]
    pub kernel_y: KernelRule,
    #[serde(default = "gaussian_rule")]
    pub kernel_z: KernelRule,
}

fn gaussian_rule() -> KernelRule {
    KernelRule::Gaussian { sigma: None }
}

fn linear_rule() -> KernelRule {
    KernelRule::Linear
}

impl DependencyMeasureConfig {
    /// Gaussian σ-rule kernels for `X` and `Z`, linear kernel for one-hot `Y`.
    pub fn new(measure: Measure) -> Self {
        DependencyMeasureConfig {
            measure,
            kernel_x: gaussian_rule(),
            kernel_y: linear_rule(),
            kernel_z: gaussian_rule(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyValue {
    pub value: f64,
    pub measure: Measure,
    pub sample_count: usize,
}

fn check_pair(k: &GramMatrix, l: &GramMatrix) -> Result<usize> {
    let n = k.sample_count();
    if l.sample_count() != n {
        return Err(BidoError::dim(format!(
            "Gram matrices over {n} and {} samples",
            l.sample_count()
        )));
    }
    if n < 2 {
        return Err(BidoError::param(format!(
            "dependency estimators need at least 2 samples, got {n}"
        )));
    }
    Ok(n)
}

/// `Tr(A·B)` for square matrices, in O(n²).
fn trace_of_product(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.rows();
    let mut t = 0.0;
    for i in 0..n {
        let row = a.row(i);
        for (j, av) in row.iter().enumerate() {
            t += av * b[(j, i)];
        }
    }
    t
}

/// Empirical constrained covariance `(1/N)·sqrt(‖K̃·L̃‖₂)`.
pub fn coco(k: &GramMatrix, l: &GramMatrix) -> Result<DependencyValue> {
    let n = check_pair(k, l)?;
    let kc = center_gram(k.matrix())?;
    let lc = center_gram(l.matrix())?;
    let norm = top_singular_pair(&kc.matmul(&lc)?)?.value;
    Ok(DependencyValue {
        value: norm.max(0.0).sqrt() / n as f64,
        measure: Measure::Coco,
        sample_count: n,
    })
}

/// Empirical (biased) HSIC `Tr(K·H·L·H)/(N−1)²`.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<DependencyValue> {
    let n = check_pair(k, l)?;
    let kc = center_gram(k.matrix())?;
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(DependencyValue {
        value: trace_of_product(&kc, l.matrix()) / denom,
        measure: Measure::Hsic,
        sample_count: n,
    })
}

pub fn estimate(measure: Measure, k: &GramMatrix, l: &GramMatrix) -> Result<DependencyValue> {
    match measure {
        Measure::Coco => coco(k, l),
        Measure::Hsic => hsic(k, l),
    }
}

/// Value of the measure and `∂value/∂K`, the upstream matrix for the
/// latent Gram matrix `k`.
pub fn estimate_with_gram_gradient(
    measure: Measure,
    k: &GramMatrix,
    l: &GramMatrix,
) -> Result<(DependencyValue, Matrix)> {
    let n = check_pair(k, l)?;
    let lc = center_gram(l.matrix())?;
    match measure {
        Measure::Hsic => {
            let kc = center_gram(k.matrix())?;
            let denom = ((n - 1) * (n - 1)) as f64;
            let value = trace_of_product(&kc, l.matrix()) / denom;
            let upstream = lc.scaled(1.0 / denom);
            Ok((
                DependencyValue {
                    value,
                    measure,
                    sample_count: n,
                },
                upstream,
            ))
        }
        Measure::Coco => {
            let kc = center_gram(k.matrix())?;
            let pair = top_singular_pair(&kc.matmul(&lc)?)?;
            let sigma = pair.value.max(0.0);
            let value = sigma.sqrt() / n as f64;
            let mut upstream = Matrix::zeros(n, n);
            if sigma > 0.0 {
                // σ = uᵀ·H·K·H·L̃·v, so ∂σ/∂K = (H·u)(L̃·v)ᵀ since H·L̃ = L̃.
                let mean_u = pair.left.iter().sum::<f64>() / n as f64;
                let hu: Vec<f64> = pair.left.iter().map(|x| x - mean_u).collect();
                let lv = lc.mul_vec(&pair.right);
                let outer = 1.0 / (2.0 * n as f64 * sigma.sqrt());
                for i in 0..n {
                    let row = upstream.row_mut(i);
                    for (r, b) in row.iter_mut().zip(&lv) {
                        *r = outer * hu[i] * b;
                    }
                }
            }
            Ok((
                DependencyValue {
                    value,
                    measure,
                    sample_count: n,
                },
                upstream,
            ))
        }
    }
}

/// Measure between a latent batch `z_samples` and a fixed Gram matrix
/// (of inputs or labels), and its gradient with respect to every entry of
/// `z_samples`.
///
/// All-equal latent samples under a Gaussian kernel give a zero gradient.
pub fn dependency_gradient_wrt_z(
    config: &DependencyMeasureConfig,
    x_or_y_gram: &GramMatrix,
    z_samples: &Matrix,
) -> Result<(DependencyValue, Matrix)> {
    if z_samples.rows() != x_or_y_gram.sample_count() {
        return Err(BidoError::dim(format!(
            "{} latent samples against a Gram matrix over {}",
            z_samples.rows(),
            x_or_y_gram.sample_count()
        )));
    }
    let kz = config.kernel_z.descriptor(z_samples.cols())?.gram(z_samples)?;
    let (value, upstream) = estimate_with_gram_gradient(config.measure, &kz, x_or_y_gram)?;
    let grad = gram_gradient_wrt_samples(&kz, z_samples, &upstream)?;
    Ok((value, grad))
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Monte Carlo estimate of the population HSIC
/// `E[k(x,x′)l(y,y′)] − 2·E[k(x,x′)l(y,y″)] + E[k(x,x′)]·E[l(y,y′)]`.
///
/// Each draw takes four independent pairs `a, b, c, d` from `sampler` and
/// averages `k_ab·l_ab − 2·k_ab·l_ac + k_ab·l_cd`, which is unbiased for
/// the expression above, so the standard error is that of an i.i.d. mean.
pub fn hsic_population_mc<R, S>(
    mut sampler: S,
    kernel_x: &KernelDescriptor,
    kernel_y: &KernelDescriptor,
    draws: usize,
    rng: &mut R,
) -> Result<McEstimate>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> Result<(Vec<f64>, Vec<f64>)>,
{
    if draws < 1000 {
        return Err(BidoError::param(format!(
            "population Monte Carlo needs at least 1000 draws, got {draws}"
        )));
    }
    let eval = |desc: &KernelDescriptor, a: &[f64], b: &[f64]| -> Result<f64> {
        let m = Matrix::from_rows(&[a, b])?;
        Ok(desc.gram(&m)?.matrix()[(0, 1)])
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let (xa, ya) = sampler(rng)?;
        let (xb, yb) = sampler(rng)?;
        let (_, yc) = sampler(rng)?;
        let (_, yd) = sampler(rng)?;
        let kab = eval(kernel_x, &xa, &xb)?;
        let h = kab * (eval(kernel_y, &ya, &yb)? - 2.0 * eval(kernel_y, &ya, &yc)? + eval(kernel_y, &yc, &yd)?);
        sum += h;
        sum_sq += h * h;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        draws,
    })
}
