//! Mini-batch training under the bilateral dependency objective
//!
//! ```text
//! 𝓛̃ = 𝓛 + λx·Σ_j d(X, Z_j) − λy·Σ_j d(Z_j, Y)
//! ```
//!
//! with every dependency term estimated on the current mini-batch. Two
//! baselines share the loop: plain cross-entropy training, and the
//! unilateral penalty `𝓛 + λ·d(X, Ŷ)` on the softmax output `Ŷ`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, Dataset};
use crate::dependency::{dependency_gradient_wrt_z, estimate, DependencyMeasureConfig, Measure};
use crate::error::{BidoError, Result};
use crate::model::{argmax, cross_entropy_with_gradient, ClassifierModel, ForwardTrace, Upstream};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Bilateral,
    UnilateralXy,
    Plain,
}

/// Regularizer settings. Weights are optional so that configuration files
/// missing a required weight are rejected by name instead of defaulting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiDOConfig {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<DependencyMeasureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_y: Option<f64>,
    /// Weight of `d(X, Ŷ)` in unilateral mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Indices into the model's taps; all taps when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<Vec<usize>>,
}

impl BiDOConfig {
    pub fn plain() -> Self {
        BiDOConfig {
            mode: Mode::Plain,
            measure: None,
            lambda_x: None,
            lambda_y: None,
            lambda: None,
            taps: None,
        }
    }

    pub fn bilateral(measure: Measure, lambda_x: f64, lambda_y: f64) -> Self {
        BiDOConfig {
            mode: Mode::Bilateral,
            measure: Some(DependencyMeasureConfig::new(measure)),
            lambda_x: Some(lambda_x),
            lambda_y: Some(lambda_y),
            lambda: None,
            taps: None,
        }
    }

    /// `d(X, Ŷ)` penalty; `Ŷ` uses the latent kernel of `measure`.
    pub fn unilateral(measure: Measure, lambda: f64) -> Self {
        BiDOConfig {
            mode: Mode::UnilateralXy,
            measure: Some(DependencyMeasureConfig::new(measure)),
            lambda_x: None,
            lambda_y: None,
            lambda: Some(lambda),
            taps: None,
        }
    }

    /// Field-level checks; `tap_count` enables tap-index validation.
    pub fn validate(&self, tap_count: Option<usize>) -> Result<()> {
        let weight = |name: &str, v: Option<f64>, required: bool| -> Result<()> {
            match v {
                None if required => Err(BidoError::config(
                    format!("bido.{name}"),
                    format!("required in {:?} mode", self.mode),
                )),
                Some(_) if !required => Err(BidoError::config(
                    format!("bido.{name}"),
                    format!("not allowed in {:?} mode", self.mode),
                )),
                Some(x) if !(x.is_finite() && x >= 0.0) => Err(BidoError::config(
                    format!("bido.{name}"),
                    format!("must be a finite nonnegative number, got {x}"),
                )),
                _ => Ok(()),
            }
        };
        let (needs_measure, lx, ly, l) = match self.mode {
            Mode::Bilateral => (true, true, true, false),
            Mode::UnilateralXy => (true, false, false, true),
            Mode::Plain => (false, false, false, false),
        };
        if needs_measure != self.measure.is_some() {
            return Err(BidoError::config(
                "bido.measure",
                if needs_measure {
                    format!("required in {:?} mode", self.mode)
                } else {
                    "plain mode takes no dependency measure".to_string()
                },
            ));
        }
        weight("lambda_x", self.lambda_x, lx)?;
        weight("lambda_y", self.lambda_y, ly)?;
        weight("lambda", self.lambda, l)?;
        if let Some(m) = &self.measure {
            for (name, rule) in [("kernel_x", m.kernel_x), ("kernel_y", m.kernel_y), ("kernel_z", m.kernel_z)] {
                rule.descriptor(1)
                    .map_err(|e| BidoError::config(format!("bido.measure.{name}"), e.to_string()))?;
            }
        }
        if let Some(taps) = &self.taps {
            if taps.is_empty() {
                return Err(BidoError::config("bido.taps", "must list at least one tap"));
            }
            if let Some(n) = tap_count {
                if let Some(t) = taps.iter().find(|&&t| t >= n) {
                    return Err(BidoError::config("bido.taps", format!("tap {t} out of range for {n} taps")));
                }
            }
        }
        Ok(())
    }

    /// `(λx, λy)`, zero where absent.
    pub fn lambdas(&self) -> (f64, f64) {
        (self.lambda_x.unwrap_or(0.0), self.lambda_y.unwrap_or(0.0))
    }

    fn selected_taps(&self, tap_count: usize) -> Vec<usize> {
        self.taps.clone().unwrap_or_else(|| (0..tap_count).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Validation mini-batches used to log dependency values each epoch.
    #[serde(default = "default_monitor_batches")]
    pub monitor_batches: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn one() -> usize {
    1
}

fn default_monitor_batches() -> usize {
    4
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.05,
            max_epochs: 20,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            eval_every: 1,
            monitor_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(BidoError::config(
                "train.batch_size",
                format!("must be at least 2 (dependency estimators need two samples), got {}", self.batch_size),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(BidoError::config(
                "train.learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.max_epochs == 0 {
            return Err(BidoError::config("train.max_epochs", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(BidoError::config("train.eval_every", "must be positive"));
        }
        Ok(())
    }
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, parameter_count: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { parameter_count } else { 0 };
        Optimizer {
            kind,
            learning_rate,
            first: vec![0.0; state],
            second: vec![0.0; state],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                self.steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                }
            }
        }
    }
}

/// Value of the regularized objective on one batch and the gradients to
/// feed into [`ClassifierModel::backward`].
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: f64,
    pub loss: f64,
    /// `d(X, Z_j)` per selected tap; empty when the term is inactive.
    pub dxz: Vec<f64>,
    /// `d(Z_j, Y)` per selected tap; empty when the term is inactive.
    pub dzy: Vec<f64>,
    /// `d(X, Ŷ)` in unilateral mode.
    pub dxyhat: Option<f64>,
    pub upstream: Upstream,
}

/// Evaluates `𝓛 + λx·Σ d(X, Z_j) − λy·Σ d(Z_j, Y)` (or the unilateral /
/// plain variant) on the batch in `trace`.
///
/// Terms with a zero weight are skipped entirely, so zero weights
/// reproduce plain training bit for bit.
pub fn bido_objective(trace: &ForwardTrace, labels: &Matrix, config: &BiDOConfig) -> Result<Objective> {
    let n = trace.batch_size();
    if n < 2 && config.mode != Mode::Plain {
        return Err(BidoError::param(format!(
            "dependency terms need a batch of at least 2 samples, got {n}"
        )));
    }
    let (loss, logits_grad) = cross_entropy_with_gradient(trace.probabilities(), labels)?;
    let mut out = Objective {
        total: loss,
        loss,
        dxz: Vec::new(),
        dzy: Vec::new(),
        dxyhat: None,
        upstream: Upstream::logits(logits_grad),
    };
    let Some(measure) = config.measure.as_ref() else {
        return Ok(out);
    };
    let x = trace.input();
    match config.mode {
        Mode::Plain => {}
        Mode::UnilateralXy => {
            let lambda = config.lambda.unwrap_or(0.0);
            if lambda > 0.0 {
                let kx = measure.kernel_x.descriptor(x.cols())?.gram(x)?;
                let (v, g) = dependency_gradient_wrt_z(measure, &kx, trace.probabilities())?;
                out.total += lambda * v.value;
                out.dxyhat = Some(v.value);
                out.upstream.probabilities = Some(g.scaled(lambda));
            }
        }
        Mode::Bilateral => {
            let (lx, ly) = config.lambdas();
            let taps = trace.taps();
            let selected = config.selected_taps(taps.len());
            let kx = if lx > 0.0 {
                Some(measure.kernel_x.descriptor(x.cols())?.gram(x)?)
            } else {
                None
            };
            let ly_gram = if ly > 0.0 {
                Some(measure.kernel_y.descriptor(labels.cols())?.gram(labels)?)
            } else {
                None
            };
            let mut tap_grads: Vec<Option<Matrix>> = vec![None; taps.len()];
            for &j in &selected {
                let z = taps.get(j).ok_or_else(|| {
                    BidoError::config("bido.taps", format!("tap {j} out of range for {} taps", taps.len()))
                })?;
                let mut grad: Option<Matrix> = None;
                if let Some(kx) = &kx {
                    let (v, g) = dependency_gradient_wrt_z(measure, kx, z)?;
                    out.total += lx * v.value;
                    out.dxz.push(v.value);
                    grad = Some(g.scaled(lx));
                }
                if let Some(ky) = &ly_gram {
                    let (v, g) = dependency_gradient_wrt_z(measure, ky, z)?;
                    out.total -= ly * v.value;
                    out.dzy.push(v.value);
                    let g = g.scaled(-ly);
                    grad = Some(match grad {
                        Some(mut acc) => {
                            acc.add_assign(&g)?;
                            acc
                        }
                        None => g,
                    });
                }
                tap_grads[j] = grad;
            }
            if tap_grads.iter().any(Option::is_some) {
                out.upstream.taps = tap_grads;
            }
        }
    }
    Ok(out)
}

/// Mean `d(X, Z_j)` and `d(Z_j, Y)` per tap over consecutive batches of
/// `batch_size` rows (at most `max_batches`) of `data`.
pub fn dependency_profile(
    model: &ClassifierModel,
    data: &Dataset,
    measure: &DependencyMeasureConfig,
    batch_size: usize,
    max_batches: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = model.tap_count();
    let mut dxz = vec![0.0; m];
    let mut dzy = vec![0.0; m];
    let mut batches = 0;
    let mut start = 0;
    while batches < max_batches && start + 2 <= data.len() {
        let end = (start + batch_size).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        start = end;
        let (x, y) = data.batch(&idx);
        let trace = model.forward_with_taps(&x)?;
        let kx = measure.kernel_x.descriptor(x.cols())?.gram(&x)?;
        let ky = measure.kernel_y.descriptor(y.cols())?.gram(&y)?;
        for (j, z) in trace.taps().iter().enumerate() {
            let kz = measure.kernel_z.descriptor(z.cols())?.gram(z)?;
            dxz[j] += estimate(measure.measure, &kx, &kz)?.value;
            dzy[j] += estimate(measure.measure, &kz, &ky)?.value;
        }
        batches += 1;
    }
    if batches == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    for v in dxz.iter_mut().chain(dzy.iter_mut()) {
        *v /= batches as f64;
    }
    Ok((dxz, dzy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub train_loss: f64,
    /// Mean regularized objective over the epoch's batches.
    pub train_objective: f64,
    pub train_acc: f64,
    /// `None` on epochs without evaluation.
    pub val_acc: Option<f64>,
    pub dxz: Vec<f64>,
    pub dzy: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub tap_count: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with one row per epoch: `epoch, train_loss, train_objective,
    /// train_acc, val_acc, dxz_1..M, dzy_1..M, seconds, config_hash`.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "epoch".to_string(),
            "train_loss".into(),
            "train_objective".into(),
            "train_acc".into(),
            "val_acc".into(),
        ];
        header.extend((1..=self.tap_count).map(|j| format!("dxz_{j}")));
        header.extend((1..=self.tap_count).map(|j| format!("dzy_{j}")));
        header.push("seconds".into());
        header.push("config_hash".into());
        w.write_record(&header)?;
        let opt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_objective.to_string(),
                r.train_acc.to_string(),
                opt(r.val_acc.as_ref()),
            ];
            row.extend((0..self.tap_count).map(|j| opt(r.dxz.get(j))));
            row.extend((0..self.tap_count).map(|j| opt(r.dzy.get(j))));
            row.push(format!("{:.3}", r.seconds));
            row.push(config_hash.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `model` in place and leaves it at the parameters of the epoch
/// with the best validation accuracy (the last epoch when `val` is empty).
///
/// Aborts with [`BidoError::Diverged`] as soon as a batch objective is not
/// finite.
pub fn train(
    model: &mut ClassifierModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    bido: &BiDOConfig,
) -> Result<TrainReport> {
    config.validate()?;
    bido.validate(Some(model.tap_count()))?;
    if config.batch_size > train_set.len() {
        return Err(BidoError::param(format!(
            "batch size {} exceeds the {} training samples",
            config.batch_size,
            train_set.len()
        )));
    }
    if train_set.input_dim() != model.input_dim() || train_set.class_count() != model.class_count() {
        return Err(BidoError::dim(format!(
            "dataset ({} features, {} classes) does not fit the model ({}, {})",
            train_set.input_dim(),
            train_set.class_count(),
            model.input_dim(),
            model.class_count()
        )));
    }
    let monitor = bido.measure.unwrap_or_else(|| DependencyMeasureConfig::new(Measure::Hsic));
    let (lx, ly) = match bido.mode {
        Mode::UnilateralXy => (bido.lambda.unwrap_or(0.0), 0.0),
        _ => bido.lambdas(),
    };
    let start = Instant::now();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.parameter_count());
    let mut records = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        let mut loss_sum = 0.0;
        let mut objective_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let iter = BatchIterator::new(train_set.len(), config.batch_size, config.seed, epoch as u64, true)?;
        for (b, idx) in iter.enumerate() {
            let (x, y) = train_set.batch(&idx);
            let trace = model.forward_with_taps(&x)?;
            let obj = bido_objective(&trace, &y, bido)?;
            if !obj.total.is_finite() {
                return Err(BidoError::Diverged {
                    epoch,
                    batch: b,
                    lambda_x: lx,
                    lambda_y: ly,
                });
            }
            for (row, &i) in trace.probabilities().row_iter().zip(&idx) {
                if argmax(row) == train_set.classes()[i] {
                    correct += 1;
                }
            }
            seen += idx.len();
            let grad = model.backward(&trace, &obj.upstream)?;
            optimizer.step(model.params_mut(), &grad);
            loss_sum += obj.loss;
            objective_sum += obj.total;
            batches += 1;
        }
        let evaluate = epoch % config.eval_every == 0 || epoch == config.max_epochs;
        let val_acc = if evaluate && !val_set.is_empty() {
            Some(model.accuracy(val_set.inputs(), val_set.labels())?)
        } else {
            None
        };
        let (dxz, dzy) = if evaluate {
            dependency_profile(model, val_set, &monitor, config.batch_size, config.monitor_batches)?
        } else {
            (Vec::new(), Vec::new())
        };
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((s, _, _)) => score > *s || (val_set.is_empty() && evaluate),
        };
        if evaluate && better {
            best = Some((score, epoch, model.params().to_vec()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_objective: objective_sum / batches.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
            dxz,
            dzy,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    let (score, best_epoch, params) = best.expect("the final epoch is always evaluated");
    model.set_params(params)?;
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_acc: score.is_finite().then_some(score),
        tap_count: model.tap_count(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
