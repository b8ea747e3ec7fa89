//! White-box model inversion by projected ascent on `log f_θ^c(x)` and its
//! evaluation with an independent classifier.
//!
//! Each trial runs `restarts` chains from uniform random starts in the
//! box and keeps the chain with the highest final log-confidence. Every
//! chain draws from its own random stream derived from
//! `(seed, repetition, class, trial, restart)`, and chains are batched in
//! fixed units of one `(repetition, class)` pair, so the report does not
//! depend on how many worker threads run the units.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_raw_array, Dataset};
use crate::error::{BidoError, Result};
use crate::model::{argmax, in_top_k, log_softmax_rows, ClassifierModel, Upstream};
use crate::numerics::Matrix;

/// Direction of each ascent step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ascent {
    /// `x ← x + η·sign(∇)`, steepest ascent in the ℓ∞ geometry of the box.
    Sign,
    /// `x ← x + η·∇`.
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `η_t = η·(1 + cos(π t / T))/2`.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub schedule: StepSchedule,
    pub ascent: Ascent,
    pub restarts: usize,
    pub trials_per_class: usize,
    /// Independent repetitions of the whole attack; mean and standard
    /// deviation of the accuracies are reported over them.
    pub repetitions: usize,
    #[serde(rename = "box")]
    pub bounds: [f64; 2],
    pub seed: u64,
    /// Attacked classes; all classes when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 500,
            step_size: 0.01,
            schedule: StepSchedule::Cosine,
            ascent: Ascent::Sign,
            restarts: 5,
            trials_per_class: 100,
            repetitions: 5,
            bounds: [0.0, 1.0],
            seed: 0,
            classes: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(BidoError::config(format!("attack.{field}"), "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("steps", self.steps)?;
        positive("restarts", self.restarts)?;
        positive("trials_per_class", self.trials_per_class)?;
        positive("repetitions", self.repetitions)?;
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(BidoError::config("attack.step_size", "must be positive"));
        }
        let [lo, hi] = self.bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(BidoError::config("attack.box", format!("[{lo}, {hi}] is not a valid range")));
        }
        if let Some(c) = &self.classes {
            if c.is_empty() {
                return Err(BidoError::config("attack.classes", "must list at least one class"));
            }
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.step_size,
            StepSchedule::Cosine => {
                self.step_size * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / self.steps as f64).cos())
            }
        }
    }
}

/// Re-seeds allowed per chain after non-finite gradients.
pub const MAX_RESEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub repetition: usize,
    pub class: usize,
    pub trial: usize,
    pub input: Vec<f64>,
    /// `log f_θ^c(x)` of the kept chain.
    pub final_log_confidence: f64,
    /// Set when every restart exhausted its re-seeds; counted as a miss.
    pub aborted: bool,
}

impl Reconstruction {
    pub fn final_confidence(&self) -> f64 {
        self.final_log_confidence.exp()
    }
}

/// SplitMix64 finalizer, used to derive independent chain seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn chain_rng(seed: u64, repetition: usize, class: usize, trial: usize, restart: usize) -> ChaCha8Rng {
    let mut h = mix(seed);
    for part in [repetition, class, trial, restart] {
        h = mix(h ^ part as u64);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub(crate) fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("BIDO_WORKERS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| BidoError::config("BIDO_WORKERS", format!("`{v}` is not a worker count")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| BidoError::Attack(format!("cannot start worker pool: {e}")))
}

/// `log f^c(x)` per row and its gradient with respect to the inputs.
fn objective_and_gradient(model: &ClassifierModel, x: &Matrix, class: usize) -> Result<(Vec<f64>, Matrix)> {
    let trace = model.forward_with_taps(x)?;
    let logp = log_softmax_rows(trace.logits());
    let values = logp.row_iter().map(|r| r[class]).collect();
    let p = trace.probabilities();
    let g = Matrix::from_fn(p.rows(), p.cols(), |r, c| (c == class) as u8 as f64 - p[(r, c)]);
    let grad = model.input_gradient(&trace, &Upstream::logits(g))?;
    Ok((values, grad))
}

fn log_confidence(model: &ClassifierModel, x: &Matrix, class: usize) -> Result<Vec<f64>> {
    let logits = model.predict_logits(x)?;
    Ok(log_softmax_rows(&logits).row_iter().map(|r| r[class]).collect())
}

/// Runs `trials_per_class` trials against `class` for one repetition.
fn invert_unit(model: &ClassifierModel, class: usize, repetition: usize, config: &AttackConfig) -> Result<Vec<Reconstruction>> {
    let d = model.input_dim();
    let [lo, hi] = config.bounds;
    let chains = config.trials_per_class * config.restarts;
    let mut rngs: Vec<ChaCha8Rng> = (0..chains)
        .map(|i| chain_rng(config.seed, repetition, class, i / config.restarts, i % config.restarts))
        .collect();
    let mut x = Matrix::zeros(chains, d);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in x.row_mut(i) {
            *v = rng.random_range(lo..=hi);
        }
    }
    let mut reseeds = vec![0usize; chains];
    let mut dead = vec![false; chains];
    for t in 0..config.steps {
        let eta = config.step_at(t);
        let (_, grad) = objective_and_gradient(model, &x, class)?;
        for i in 0..chains {
            if dead[i] {
                continue;
            }
            let g = grad.row(i);
            if g.iter().any(|v| !v.is_finite()) {
                reseeds[i] += 1;
                if reseeds[i] > MAX_RESEEDS {
                    dead[i] = true;
                    continue;
                }
                let rng = &mut rngs[i];
                for v in x.row_mut(i) {
                    *v = rng.random_range(lo..=hi);
                }
                continue;
            }
            for (xv, gv) in x.row_mut(i).iter_mut().zip(g) {
                let dir = match config.ascent {
                    Ascent::Sign if *gv > 0.0 => 1.0,
                    Ascent::Sign if *gv < 0.0 => -1.0,
                    Ascent::Sign => 0.0,
                    Ascent::Gradient => *gv,
                };
                *xv = (*xv + eta * dir).clamp(lo, hi);
            }
        }
    }
    let finals = log_confidence(model, &x, class)?;
    let mut out = Vec::with_capacity(config.trials_per_class);
    for trial in 0..config.trials_per_class {
        let range = trial * config.restarts..(trial + 1) * config.restarts;
        let best = range
            .clone()
            .filter(|&i| !dead[i] && finals[i].is_finite())
            .max_by(|&a, &b| finals[a].total_cmp(&finals[b]).then(b.cmp(&a)));
        out.push(match best {
            Some(i) => Reconstruction {
                repetition,
                class,
                trial,
                input: x.row(i).to_vec(),
                final_log_confidence: finals[i],
                aborted: false,
            },
            None => Reconstruction {
                repetition,
                class,
                trial,
                input: x.row(range.start).to_vec(),
                final_log_confidence: f64::NEG_INFINITY,
                aborted: true,
            },
        });
    }
    Ok(out)
}

fn attacked_classes(model: &ClassifierModel, config: &AttackConfig) -> Result<Vec<usize>> {
    let k = model.class_count();
    let classes = config.classes.clone().unwrap_or_else(|| (0..k).collect());
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(BidoError::param(format!("class {c} outside the model's {k} classes")));
    }
    Ok(classes)
}

/// Reconstructions for `class` in repetition 0: `trials_per_class` inputs,
/// each the best of `restarts` chains.
pub fn invert_class(target: &ClassifierModel, class_index: usize, config: &AttackConfig) -> Result<Vec<Reconstruction>> {
    config.validate()?;
    if class_index >= target.class_count() {
        return Err(BidoError::param(format!(
            "class {class_index} outside the model's {} classes",
            target.class_count()
        )));
    }
    invert_unit(target, class_index, 0, config)
}

/// All repetitions over all attacked classes, in `(repetition, class,
/// trial)` order, computed on the `BIDO_WORKERS` pool.
pub fn run_attack(target: &ClassifierModel, config: &AttackConfig) -> Result<Vec<Reconstruction>> {
    config.validate()?;
    let classes = attacked_classes(target, config)?;
    let units: Vec<(usize, usize)> = (0..config.repetitions)
        .flat_map(|r| classes.iter().map(move |&c| (r, c)))
        .collect();
    let pool = worker_pool()?;
    let results: Vec<Result<Vec<Reconstruction>>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(r, c)| invert_unit(target, c, r, config))
            .collect()
    });
    let mut out = Vec::with_capacity(units.len() * config.trials_per_class);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub repetition: usize,
    pub class: usize,
    pub trial: usize,
    pub final_confidence: f64,
    pub eval_top1: usize,
    pub eval_top5_hit: bool,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub attack_acc: f64,
    pub attack_acc5: f64,
    pub mean_confidence: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    /// Mean over repetitions of the top-1 hit rate.
    pub attack_acc: f64,
    pub attack_acc5: f64,
    /// Sample standard deviation over repetitions (0 for one repetition).
    pub std_acc: f64,
    pub std_acc5: f64,
    pub repetitions: usize,
    pub per_class: Vec<ClassBreakdown>,
    pub aborted_trials: usize,
}

#[derive(Serialize)]
struct AttackSummary<'a> {
    attack_acc: f64,
    attack_acc5: f64,
    std_acc: f64,
    std_acc5: f64,
    repetitions: usize,
    reconstructions: usize,
    aborted_trials: usize,
    per_class: &'a [ClassBreakdown],
    config_hash: &'a str,
}

impl AttackReport {
    /// One row per reconstruction: `repetition, class, trial,
    /// final_confidence, eval_top1, eval_top5_hit, config_hash`.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "repetition",
            "class",
            "trial",
            "final_confidence",
            "eval_top1",
            "eval_top5_hit",
            "config_hash",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.repetition.to_string(),
                r.class.to_string(),
                r.trial.to_string(),
                r.final_confidence.to_string(),
                r.eval_top1.to_string(),
                (r.eval_top5_hit as u8).to_string(),
                config_hash.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self, config_hash: &str) -> Result<String> {
        Ok(serde_json::to_string_pretty(&AttackSummary {
            attack_acc: self.attack_acc,
            attack_acc5: self.attack_acc5,
            std_acc: self.std_acc,
            std_acc5: self.std_acc5,
            repetitions: self.repetitions,
            reconstructions: self.rows.len(),
            aborted_trials: self.aborted_trials,
            per_class: &self.per_class,
            config_hash,
        })? + "\n")
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores reconstructions with the evaluation classifier: a hit when its
/// top-1 (top-5) prediction is the attacked class. Aborted trials are misses.
pub fn evaluate_attack(
    reconstructions: &[Reconstruction],
    target_class_count: usize,
    evaluation_model: &ClassifierModel,
) -> Result<AttackReport> {
    if evaluation_model.class_count() != target_class_count {
        return Err(BidoError::Consistency(format!(
            "target has {target_class_count} classes, evaluation model {}",
            evaluation_model.class_count()
        )));
    }
    if reconstructions.is_empty() {
        return Err(BidoError::param("no reconstructions to evaluate"));
    }
    let d = evaluation_model.input_dim();
    let mut data = Vec::with_capacity(reconstructions.len() * d);
    for r in reconstructions {
        if r.input.len() != d {
            return Err(BidoError::dim(format!(
                "reconstruction has {} values, evaluation model expects {d}",
                r.input.len()
            )));
        }
        data.extend_from_slice(&r.input);
    }
    let probs = evaluation_model.predict(&Matrix::from_vec(reconstructions.len(), d, data)?)?;
    let rows: Vec<AttackRow> = reconstructions
        .iter()
        .zip(probs.row_iter())
        .map(|(r, p)| AttackRow {
            repetition: r.repetition,
            class: r.class,
            trial: r.trial,
            final_confidence: r.final_confidence(),
            eval_top1: argmax(p),
            eval_top5_hit: !r.aborted && in_top_k(p, r.class, 5),
            aborted: r.aborted,
        })
        .collect();
    let hit1 = |row: &AttackRow| !row.aborted && row.eval_top1 == row.class;
    let repetitions = rows.iter().map(|r| r.repetition).max().unwrap_or(0) + 1;
    let mut acc = Vec::new();
    let mut acc5 = Vec::new();
    for rep in 0..repetitions {
        let these: Vec<&AttackRow> = rows.iter().filter(|r| r.repetition == rep).collect();
        if these.is_empty() {
            continue;
        }
        let n = these.len() as f64;
        acc.push(these.iter().filter(|r| hit1(r)).count() as f64 / n);
        acc5.push(these.iter().filter(|r| r.eval_top5_hit).count() as f64 / n);
    }
    let (attack_acc, std_acc) = mean_std(&acc);
    let (attack_acc5, std_acc5) = mean_std(&acc5);
    let mut classes: Vec<usize> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .into_iter()
        .map(|c| {
            let these: Vec<&AttackRow> = rows.iter().filter(|r| r.class == c).collect();
            let n = these.len() as f64;
            ClassBreakdown {
                class: c,
                attack_acc: these.iter().filter(|r| hit1(r)).count() as f64 / n,
                attack_acc5: these.iter().filter(|r| r.eval_top5_hit).count() as f64 / n,
                mean_confidence: these.iter().map(|r| r.final_confidence).sum::<f64>() / n,
                count: these.len(),
            }
        })
        .collect();
    Ok(AttackReport {
        aborted_trials: rows.iter().filter(|r| r.aborted).count(),
        rows,
        attack_acc,
        attack_acc5,
        std_acc,
        std_acc5,
        repetitions: acc.len(),
        per_class,
    })
}

/// Writes each reconstruction as raw little-endian `f64` with a JSON
/// sidecar `{shape, class, trial, repetition}`.
pub fn dump_reconstructions(reconstructions: &[Reconstruction], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in reconstructions {
        let path = dir.join(format!("rep{}_class{}_trial{}.f64", r.repetition, r.class, r.trial));
        let sidecar = serde_json::json!({
            "shape": [r.input.len()],
            "class": r.class,
            "trial": r.trial,
            "repetition": r.repetition,
        });
        write_raw_array(&path, &r.input, &sidecar)?;
    }
    Ok(())
}

/// One point of a privacy–utility curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyUtilityPoint {
    pub val_acc: f64,
    pub attack_acc: f64,
    pub attack_acc5: f64,
    pub std_acc: f64,
    pub std_acc5: f64,
}

/// Utility of `target` on `val_set` and the attack accuracy against it.
pub fn privacy_utility_point(
    target: &ClassifierModel,
    attack_config: &AttackConfig,
    evaluation_model: &ClassifierModel,
    val_set: &Dataset,
) -> Result<(PrivacyUtilityPoint, AttackReport)> {
    let val_acc = target.accuracy(val_set.inputs(), val_set.labels())?;
    let recon = run_attack(target, attack_config)?;
    let report = evaluate_attack(&recon, target.class_count(), evaluation_model)?;
    Ok((
        PrivacyUtilityPoint {
            val_acc,
            attack_acc: report.attack_acc,
            attack_acc5: report.attack_acc5,
            std_acc: report.std_acc,
            std_acc5: report.std_acc5,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mlp_layers, LayerSpec};

    fn linear_softmax(w: [[f64; 2]; 2]) -> ClassifierModel {
        let layers = vec![LayerSpec::dense(2, 2).tapped(), LayerSpec::softmax(2)];
        let mut m = ClassifierModel::with_zero_params(layers, 2, 2).unwrap();
        // W is stored in×out; logit_c = Σ_i x_i W[i][c].
        m.set_params(vec![w[0][0], w[0][1], w[1][0], w[1][1], 0.0, 0.0]).unwrap();
        m
    }

    fn quick(trials: usize) -> AttackConfig {
        AttackConfig {
            steps: 60,
            step_size: 0.05,
            restarts: 2,
            trials_per_class: trials,
            repetitions: 1,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_target_keeps_log_one_over_k() {
        let m = ClassifierModel::with_zero_params(mlp_layers(4, &[3], 5), 5, 4).unwrap();
        for r in invert_class(&m, 2, &quick(4)).unwrap() {
            assert!((r.final_log_confidence - (0.2f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_target_reaches_maximizing_vertex() {
        // logit_0 − logit_1 = 2·x_0 − 3·x_1 → maximized at the vertex (1, 0).
        let m = linear_softmax([[1.0, -1.0], [-1.0, 2.0]]);
        for ascent in [Ascent::Sign, Ascent::Gradient] {
            let cfg = AttackConfig {
                ascent,
                step_size: 0.5,
                schedule: StepSchedule::Constant,
                ..quick(5)
            };
            for r in invert_class(&m, 0, &cfg).unwrap() {
                assert_eq!(r.input, vec![1.0, 0.0], "{ascent:?}");
            }
        }
    }

    #[test]
    fn reconstructions_stay_in_box_and_are_deterministic() {
        let m = ClassifierModel::new(mlp_layers(6, &[5], 3), 3, 6, 2).unwrap();
        let cfg = AttackConfig {
            bounds: [0.2, 0.7],
            step_size: 0.3,
            ascent: Ascent::Gradient,
            ..quick(6)
        };
        let a = invert_class(&m, 1, &cfg).unwrap();
        assert!(a.iter().all(|r| r.input.iter().all(|v| (0.2..=0.7).contains(v))));
        assert_eq!(a, invert_class(&m, 1, &cfg).unwrap());
    }

    #[test]
    fn small_steps_rarely_decrease_objective() {
        let m = ClassifierModel::new(mlp_layers(5, &[8, 6], 3), 3, 5, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ascent in [Ascent::Sign, Ascent::Gradient] {
            let mut x = Matrix::from_fn(10, 5, |_, _| rng.random_range(0.0..1.0));
            let (mut prev, _) = objective_and_gradient(&m, &x, 2).unwrap();
            let mut ok = 0;
            let mut total = 0;
            for _ in 0..50 {
                let (_, g) = objective_and_gradient(&m, &x, 2).unwrap();
                for (xv, gv) in x.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    let d = if ascent == Ascent::Sign { gv.signum() * (*gv != 0.0) as u8 as f64 } else { *gv };
                    *xv = (*xv + 1e-3 * d).clamp(0.0, 1.0);
                }
                let (now, _) = objective_and_gradient(&m, &x, 2).unwrap();
                for (a, b) in now.iter().zip(&prev) {
                    total += 1;
                    if a >= b {
                        ok += 1;
                    }
                }
                prev = now;
            }
            assert!(ok as f64 >= 0.95 * total as f64, "{ascent:?}: {ok}/{total}");
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = ClassifierModel::new(mlp_layers(6, &[5], 3), 3, 6, 4).unwrap();
        let cfg = AttackConfig {
            repetitions: 2,
            ..quick(3)
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool3 = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = pool1.install(|| run_attack(&m, &cfg)).unwrap();
        let b = pool3.install(|| run_attack(&m, &cfg)).unwrap();
        assert_eq!(a, b);
        let mut serial = Vec::new();
        for r in 0..2 {
            for c in 0..3 {
                serial.extend(invert_unit(&m, c, r, &cfg).unwrap());
            }
        }
        assert_eq!(a, serial);
    }

    fn recon(class: usize, rep: usize, input: Vec<f64>) -> Reconstruction {
        Reconstruction {
            repetition: rep,
            class,
            trial: 0,
            input,
            final_log_confidence: -0.1,
            aborted: false,
        }
    }

    #[test]
    fn evaluation_matches_hand_count() {
        let eval = ClassifierModel::new(mlp_layers(3, &[4], 6), 6, 3, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recons: Vec<Reconstruction> = (0..60)
            .map(|i| recon(i % 6, i / 30, (0..3).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        let report = evaluate_attack(&recons, 6, &eval).unwrap();
        // Independent recount from raw predictions.
        let x = Matrix::from_fn(60, 3, |r, c| recons[r].input[c]);
        let p = eval.predict(&x).unwrap();
        let mut hits = [0usize; 2];
        let mut hits5 = [0usize; 2];
        for (i, r) in recons.iter().enumerate() {
            let row = p.row(i);
            if argmax(row) == r.class {
                hits[r.repetition] += 1;
            }
            let rank = row.iter().filter(|&&v| v > row[r.class]).count();
            if rank < 5 {
                hits5[r.repetition] += 1;
            }
        }
        let a = [hits[0] as f64 / 30.0, hits[1] as f64 / 30.0];
        let a5 = [hits5[0] as f64 / 30.0, hits5[1] as f64 / 30.0];
        assert_eq!(report.attack_acc, (a[0] + a[1]) / 2.0);
        assert_eq!(report.attack_acc5, (a5[0] + a5[1]) / 2.0);
        assert!((report.std_acc - (a[0] - a[1]).abs() / 2f64.sqrt()).abs() < 1e-15);
        assert!(report.attack_acc <= report.attack_acc5);
        assert_eq!(report.per_class.iter().map(|c| c.count).sum::<usize>(), 60);
    }

    #[test]
    fn evaluation_rejects_class_mismatch() {
        let eval = ClassifierModel::new(mlp_layers(3, &[4], 4), 4, 3, 9).unwrap();
        let r = vec![recon(0, 0, vec![0.0; 3])];
        assert!(matches!(evaluate_attack(&r, 5, &eval), Err(BidoError::Consistency(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig {
            restarts: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(BidoError::Config { field, .. }) if field == "attack.restarts"));
        let bad_box = AttackConfig {
            bounds: [1.0, 0.0],
            ..Default::default()
        };
        assert!(bad_box.validate().is_err());
    }
}
