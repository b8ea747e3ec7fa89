//! Estimator-vs-oracle, gradient and calibration checks, shared by the
//! `selftest` command and the test suites. Every check is seeded, so its
//! log line is reproducible.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dependency::{coco, hsic, KernelRule, Measure};
use crate::error::Result;
use crate::kernels::{gaussian_gram, KernelDescriptor};
use crate::model::{mlp_layers, ClassifierModel};
use crate::numerics::{center_gram, finite_diff_check, Matrix};
use crate::oracle::{coco_dense, hsic_quadruple_sum, jacobi_singular_values, permutation_null, quantile};
use crate::training::{bido_objective, BiDOConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Knobs for the self-test; `hsic_perturbation` scales the fast HSIC
/// estimate by `1 + p` to demonstrate that the gate trips.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelftestOptions {
    pub hsic_perturbation: f64,
}

fn random_gram_pair(rng: &mut ChaCha8Rng, n: usize) -> (crate::kernels::GramMatrix, crate::kernels::GramMatrix) {
    let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
    let y = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
    let sx = rng.random_range(0.3..2.0);
    let sy = rng.random_range(0.3..2.0);
    (gaussian_gram(&x, sx).unwrap(), gaussian_gram(&y, sy).unwrap())
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Fast HSIC against the literal `Tr(KHLH)/(N−1)²` expansion.
pub fn hsic_oracle_check(pairs: usize, n: usize, seed: u64, options: &SelftestOptions) -> Result<(f64, CheckOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (k, l) = random_gram_pair(&mut rng, n);
        let fast = hsic(&k, &l)?.value * (1.0 + options.hsic_perturbation);
        worst = worst.max(relative(fast, hsic_quadruple_sum(k.matrix(), l.matrix())));
    }
    let tol = 1e-12;
    Ok((
        worst,
        CheckOutcome {
            name: "hsic_oracle",
            pass: worst < tol,
            detail: format!("max relative error {worst:.3e} over {pairs} pairs of size {n} (tolerance {tol:e})"),
        },
    ))
}

/// Power-iteration COCO against the Jacobi-SVD path.
pub fn coco_oracle_check(pairs: usize, n: usize, seed: u64) -> Result<(f64, CheckOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (k, l) = random_gram_pair(&mut rng, n);
        worst = worst.max(relative(coco(&k, &l)?.value, coco_dense(k.matrix(), l.matrix())));
    }
    let tol = 1e-9;
    Ok((
        worst,
        CheckOutcome {
            name: "coco_oracle",
            pass: worst < tol,
            detail: format!("max relative error {worst:.3e} over {pairs} pairs of size {n} (tolerance {tol:e})"),
        },
    ))
}

/// 3 → 4 → 3 → 2 ReLU network (39 parameters, two tapped layers) with
/// parameters jittered away from the initialization.
pub fn probe_model(seed: u64) -> ClassifierModel {
    let mut m = ClassifierModel::new(mlp_layers(3, &[4, 3], 2), 2, 3, seed).expect("valid probe");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in m.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    m
}

/// Eight inputs in `[0,1]³` with alternating one-hot labels.
pub fn probe_batch(seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(8, 3, |_, _| rng.random_range(0.0..1.0));
    let y = Matrix::from_fn(8, 2, |r, c| ((r % 2) == c) as u8 as f64);
    (x, y)
}

/// Bilateral settings with narrow kernels so every term has a visible
/// gradient on the probe.
pub fn probe_bido(measure: Measure) -> BiDOConfig {
    let mut cfg = BiDOConfig::bilateral(measure, 0.7, 1.3);
    let m = cfg.measure.as_mut().expect("bilateral has a measure");
    m.kernel_x = KernelRule::Gaussian { sigma: Some(0.5) };
    m.kernel_z = KernelRule::Gaussian { sigma: Some(0.5) };
    cfg
}

/// Largest relative error between the backpropagated objective gradient
/// and central differences over all parameters.
pub fn objective_gradient_error(model: &ClassifierModel, cfg: &BiDOConfig, x: &Matrix, y: &Matrix) -> Result<f64> {
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p.to_vec()).expect("same length");
        m.forward_with_taps(x)
            .and_then(|t| bido_objective(&t, y, cfg))
            .map(|o| o.total)
            .unwrap_or(f64::NAN)
    };
    let g = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p.to_vec()).expect("same length");
        m.forward_with_taps(x)
            .and_then(|t| {
                let o = bido_objective(&t, y, cfg)?;
                m.backward(&t, &o.upstream)
            })
            .unwrap_or_else(|_| vec![f64::NAN; p.len()])
    };
    Ok(finite_diff_check(f, g, model.params(), 1e-5, 1.0)?.max_relative_error)
}

/// Whether every tap of the probe has relative singular gap above
/// `min_gap` for both centered Gram products entering COCO.
pub fn coco_probe_separated(model: &ClassifierModel, cfg: &BiDOConfig, x: &Matrix, y: &Matrix, min_gap: f64) -> Result<bool> {
    let meas = cfg.measure.expect("bilateral has a measure");
    let kx = meas.kernel_x.descriptor(x.cols())?.gram(x)?;
    let ky = meas.kernel_y.descriptor(y.cols())?.gram(y)?;
    let t = model.forward_with_taps(x)?;
    for z in t.taps() {
        let kz = meas.kernel_z.descriptor(z.cols())?.gram(z)?;
        let a = center_gram(kz.matrix())?;
        for other in [&kx, &ky] {
            let b = center_gram(other.matrix())?;
            let s = jacobi_singular_values(&a.matmul(&b)?);
            if s[0] - s[1] <= min_gap * s[0] {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn hsic_gradient_check(seeds: u64) -> Result<(f64, CheckOutcome)> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let m = probe_model(seed);
        let (x, y) = probe_batch(seed);
        worst = worst.max(objective_gradient_error(&m, &probe_bido(Measure::Hsic), &x, &y)?);
    }
    let tol = 1e-4;
    Ok((
        worst,
        CheckOutcome {
            name: "hsic_gradient",
            pass: worst < tol,
            detail: format!("max relative error {worst:.3e} over {seeds} probes (tolerance {tol:e})"),
        },
    ))
}

/// COCO gradient check over the first `wanted` probes whose singular gap
/// exceeds `0.1·σ_max`.
pub fn coco_gradient_check(wanted: usize) -> Result<(f64, CheckOutcome)> {
    let cfg = probe_bido(Measure::Coco);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..200 {
        if checked == wanted {
            break;
        }
        let m = probe_model(seed);
        let (x, y) = probe_batch(seed);
        if !coco_probe_separated(&m, &cfg, &x, &y, 0.1)? {
            continue;
        }
        worst = worst.max(objective_gradient_error(&m, &cfg, &x, &y)?);
        checked += 1;
    }
    let tol = 1e-3;
    Ok((
        worst,
        CheckOutcome {
            name: "coco_gradient",
            pass: checked == wanted && worst < tol,
            detail: format!("max relative error {worst:.3e} over {checked} separated probes (tolerance {tol:e})"),
        },
    ))
}

/// Fraction of independent `(X, Y)` draws whose HSIC lies inside the
/// central 99% of its permutation null, for each sample size.
pub fn independence_calibration(
    sizes: &[usize],
    trials: usize,
    permutations: usize,
    seed: u64,
) -> Result<(Vec<f64>, CheckOutcome)> {
    let mut fractions = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let mut inside = 0;
        for _ in 0..trials {
            let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(0.0..1.0));
            let y = Matrix::from_fn(n, 2, |_, _| rng.random_range(0.0..1.0));
            let k = KernelDescriptor::gaussian_default(2).gram(&x)?;
            let l = KernelDescriptor::gaussian_default(2).gram(&y)?;
            let stat = hsic(&k, &l)?.value;
            let null = permutation_null(k.matrix(), l.matrix(), permutations, &mut rng, |a, b| {
                let ga = crate::kernels::GramMatrix::from_matrix(a.clone(), *k.descriptor()).expect("square");
                let gb = crate::kernels::GramMatrix::from_matrix(b.clone(), *l.descriptor()).expect("square");
                hsic(&ga, &gb).expect("same size").value
            });
            if (quantile(&null, 0.005)..=quantile(&null, 0.995)).contains(&stat) {
                inside += 1;
            }
        }
        fractions.push(inside as f64 / trials as f64);
    }
    let pass = fractions.iter().all(|&f| f >= 0.95);
    let detail = sizes
        .iter()
        .zip(&fractions)
        .map(|(n, f)| format!("N={n}: {:.1}%", 100.0 * f))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        fractions,
        CheckOutcome {
            name: "independence_calibration",
            pass,
            detail: format!("{detail} inside the central 99% of {permutations} permutations (need ≥ 95%)"),
        },
    ))
}

/// The checks run by `bido selftest`, in order.
pub fn run_selftest(options: &SelftestOptions) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        hsic_oracle_check(50, 8, 11, options)?.1,
        coco_oracle_check(50, 8, 12)?.1,
        hsic_gradient_check(4)?.1,
        coco_gradient_check(3)?.1,
        independence_calibration(&[32, 64], 20, 500, 13)?.1,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes_and_is_reproducible() {
        let a = run_selftest(&SelftestOptions::default()).unwrap();
        assert!(a.iter().all(|c| c.pass), "{a:?}");
        assert_eq!(a, run_selftest(&SelftestOptions::default()).unwrap());
    }

    #[test]
    fn perturbed_hsic_trips_the_oracle_check() {
        let opts = SelftestOptions { hsic_perturbation: 1e-3 };
        let first = run_selftest(&opts).unwrap().into_iter().find(|c| !c.pass).unwrap();
        assert_eq!(first.name, "hsic_oracle");
    }
}
