//! Single-term ablations: train each regularizer variant from the same
//! initialization, attack it, and compare the privacy–utility points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_attack, run_attack, AttackConfig, AttackReport};
use crate::data::Dataset;
use crate::error::{BidoError, Result};
use crate::model::{Architecture, ClassifierModel};
use crate::training::{train, BiDOConfig, Mode, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub bido: BiDOConfig,
}

impl AblationVariant {
    pub fn new(name: impl Into<String>, bido: BiDOConfig) -> Self {
        AblationVariant {
            name: name.into(),
            bido,
        }
    }
}

/// Everything shared by the variants of one ablation.
pub struct AblationSetup<'a> {
    pub train_set: &'a Dataset,
    pub val_set: &'a Dataset,
    /// Utility is measured here; falls back to `val_set` when empty.
    pub test_set: &'a Dataset,
    pub architecture: &'a Architecture,
    pub model_seed: u64,
    pub train: &'a TrainConfig,
    pub attack: &'a AttackConfig,
    pub evaluation_model: &'a ClassifierModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub accuracy: f64,
    pub attack_acc: f64,
    pub attack_acc5: f64,
    pub std_acc: f64,
}

impl AblationRow {
    /// At least as accurate and at most as attackable as `other`.
    pub fn weakly_dominates(&self, other: &AblationRow) -> bool {
        self.accuracy >= other.accuracy && self.attack_acc <= other.attack_acc
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub train_reports: Vec<TrainReport>,
    pub attack_reports: Vec<AttackReport>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// True when no single-term variant weakly dominates the full variant.
    pub fn full_is_undominated(&self) -> bool {
        let Some(full) = self.rows.iter().find(|r| r.lambda_x > 0.0 && r.lambda_y > 0.0) else {
            return false;
        };
        self.rows
            .iter()
            .filter(|r| (r.lambda_x > 0.0) != (r.lambda_y > 0.0))
            .all(|r| !r.weakly_dominates(full))
    }

    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "variant",
            "lambda_x",
            "lambda_y",
            "accuracy",
            "attack_acc",
            "attack_acc5",
            "std_acc",
            "config_hash",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.lambda_x.to_string(),
                r.lambda_y.to_string(),
                r.accuracy.to_string(),
                r.attack_acc.to_string(),
                r.attack_acc5.to_string(),
                r.std_acc.to_string(),
                config_hash.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_coverage(variants: &[AblationVariant]) -> Result<()> {
    let weights: Vec<(f64, f64)> = variants
        .iter()
        .filter(|v| v.bido.mode == Mode::Bilateral)
        .map(|v| v.bido.lambdas())
        .collect();
    let has = |f: &dyn Fn(f64, f64) -> bool| weights.iter().any(|&(x, y)| f(x, y));
    let missing = [
        ("lambda_y = 0", has(&|x, y| x > 0.0 && y == 0.0)),
        ("lambda_x = 0", has(&|x, y| x == 0.0 && y > 0.0)),
        ("both terms", has(&|x, y| x > 0.0 && y > 0.0)),
    ]
    .into_iter()
    .filter(|(_, ok)| !ok)
    .map(|(name, _)| name)
    .collect::<Vec<_>>();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(BidoError::config(
            "variants",
            format!("no bilateral variant with {}", missing.join(", ")),
        ))
    }
}

/// Trains and attacks every variant. All variants start from the same
/// initialization and batch order.
pub fn ablation_run(setup: &AblationSetup<'_>, variants: &[AblationVariant]) -> Result<AblationReport> {
    check_coverage(variants)?;
    let utility_set = if setup.test_set.is_empty() {
        setup.val_set
    } else {
        setup.test_set
    };
    let mut report = AblationReport {
        rows: Vec::new(),
        train_reports: Vec::new(),
        attack_reports: Vec::new(),
    };
    for v in variants {
        let mut model = setup.architecture.build(
            setup.train_set.input_dim(),
            setup.train_set.class_count(),
            setup.model_seed,
        )?;
        let tr = train(&mut model, setup.train_set, setup.val_set, setup.train, &v.bido)?;
        let accuracy = model.accuracy(utility_set.inputs(), utility_set.labels())?;
        let recon = run_attack(&model, setup.attack)?;
        let ar = evaluate_attack(&recon, model.class_count(), setup.evaluation_model)?;
        let (lambda_x, lambda_y) = match v.bido.mode {
            Mode::UnilateralXy => (v.bido.lambda.unwrap_or(0.0), 0.0),
            _ => v.bido.lambdas(),
        };
        report.rows.push(AblationRow {
            name: v.name.clone(),
            lambda_x,
            lambda_y,
            accuracy,
            attack_acc: ar.attack_acc,
            attack_acc5: ar.attack_acc5,
            std_acc: ar.std_acc,
        });
        report.train_reports.push(tr);
        report.attack_reports.push(ar);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synthetic_blobs};
    use crate::dependency::Measure;

    fn row(name: &str, lx: f64, ly: f64, acc: f64, att: f64) -> AblationRow {
        AblationRow {
            name: name.into(),
            lambda_x: lx,
            lambda_y: ly,
            accuracy: acc,
            attack_acc: att,
            attack_acc5: att,
            std_acc: 0.0,
        }
    }

    #[test]
    fn dominance_rule() {
        let mut r = AblationReport {
            rows: vec![row("full", 1.0, 1.0, 0.9, 0.3), row("no_y", 1.0, 0.0, 0.5, 0.2), row("no_x", 0.0, 1.0, 0.95, 0.6)],
            train_reports: vec![],
            attack_reports: vec![],
        };
        assert!(r.full_is_undominated());
        r.rows[1] = row("no_y", 1.0, 0.0, 0.9, 0.3);
        assert!(!r.full_is_undominated());
    }

    #[test]
    fn coverage_is_enforced() {
        let only_full = [AblationVariant::new("full", BiDOConfig::bilateral(Measure::Hsic, 1.0, 1.0))];
        assert!(matches!(check_coverage(&only_full), Err(BidoError::Config { field, .. }) if field == "variants"));
    }

    #[test]
    fn zero_weights_reproduce_plain_metrics() {
        let data = synthetic_blobs(3, 40, 4, 0.5, 1).unwrap();
        let (tr, va, te) = split(&data, [0.6, 0.2, 0.2], 2).unwrap();
        let arch = Architecture::Mlp { hidden: vec![8, 6] };
        let eval = arch.build(4, 3, 77).unwrap();
        let tc = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let ac = AttackConfig {
            steps: 10,
            restarts: 1,
            trials_per_class: 3,
            repetitions: 1,
            ..Default::default()
        };
        let setup = AblationSetup {
            train_set: &tr,
            val_set: &va,
            test_set: &te,
            architecture: &arch,
            model_seed: 5,
            train: &tc,
            attack: &ac,
            evaluation_model: &eval,
        };
        let variants = [
            AblationVariant::new("full", BiDOConfig::bilateral(Measure::Hsic, 1.0, 1.0)),
            AblationVariant::new("no_y", BiDOConfig::bilateral(Measure::Hsic, 1.0, 0.0)),
            AblationVariant::new("no_x", BiDOConfig::bilateral(Measure::Hsic, 0.0, 1.0)),
            AblationVariant::new("zero", BiDOConfig::bilateral(Measure::Hsic, 0.0, 0.0)),
            AblationVariant::new("plain", BiDOConfig::plain()),
        ];
        let rep = ablation_run(&setup, &variants).unwrap();
        assert_eq!(rep.rows.len(), 5);
        let (z, p) = (rep.row("zero").unwrap(), rep.row("plain").unwrap());
        assert_eq!((z.accuracy, z.attack_acc), (p.accuracy, p.attack_acc));
        assert_eq!(rep.train_reports[3].records.iter().map(|r| r.train_loss).collect::<Vec<_>>(),
            rep.train_reports[4].records.iter().map(|r| r.train_loss).collect::<Vec<_>>());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        rep.write_csv(&path, "abc").unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 6);
    }
}
