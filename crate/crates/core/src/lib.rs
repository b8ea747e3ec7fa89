//! # bido
//!
//! Bilateral dependency optimization: train classifiers whose hidden
//! representations carry as little information about the raw input as
//! possible while staying predictive of the label, and measure how well
//! that defends against white-box model inversion.
//!
//! The training objective adds, for every tapped layer `Z_j`,
//!
//! ```text
//! λx·d(X, Z_j) − λy·d(Z_j, Y)
//! ```
//!
//! to the cross-entropy, where `d` is a kernel dependency measure: the
//! constrained covariance (COCO) or the Hilbert–Schmidt independence
//! criterion (HSIC), both estimated on the current mini-batch.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`numerics`] | Dense matrices, centering, power iteration, gradient checks |
//! | [`kernels`] | Gaussian and linear Gram matrices and their sample gradients |
//! | [`dependency`] | COCO and HSIC estimators with gradients |
//! | [`model`] | Layered classifiers with tapped activations, checkpoints |
//! | [`training`] | Plain, bilateral and unilateral training loops |
//! | [`attack`] | Gradient-ascent model inversion and its evaluation |
//! | [`ablation`] | Single-term ablations of the regularizer |
//! | [`data`] | MNIST IDX loading, synthetic data, splits, raw formats |
//! | [`config`], [`cli`] | JSON experiment configs and the `bido` commands |
//! | [`oracle`], [`selftest`] | Slow reference paths and the checks built on them |
//!
//! ## Quick start
//!
//! ```rust
//! use bido::data::{split, synthetic_blobs};
//! use bido::dependency::Measure;
//! use bido::model::Architecture;
//! use bido::training::{train, BiDOConfig, TrainConfig};
//!
//! let data = synthetic_blobs(2, 100, 2, 0.5, 7)?;
//! let (train_set, val_set, _) = split(&data, [0.8, 0.2, 0.0], 7)?;
//! let mut model = Architecture::Mlp { hidden: vec![16, 8] }.build(2, 2, 7)?;
//! let config = TrainConfig { max_epochs: 30, ..Default::default() };
//! let report = train(&mut model, &train_set, &val_set, &config,
//!                    &BiDOConfig::bilateral(Measure::Hsic, 0.1, 1.0))?;
//! assert!(report.best_val_acc.unwrap() >= 0.95);
//! # Ok::<(), bido::BidoError>(())
//! ```

pub mod ablation;
pub mod attack;
pub mod cli;
pub mod config;
pub mod data;
pub mod dependency;
pub mod error;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod selftest;
pub mod training;

pub use error::{BidoError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/dependency.md")]
    mod dependency {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/attack.md")]
    mod attack {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
