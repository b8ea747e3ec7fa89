//! Subcommand implementations behind the `bido` binary.
//!
//! Each command reads a JSON config, writes its artifacts into the
//! configured output directory and returns a [`Result`]; [`exit_code`] maps
//! errors onto the stable exit statuses 1 (failure) and 2 (user error).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{dump_reconstructions, evaluate_attack, run_attack, AttackConfig, AttackReport};
use crate::config::{config_hash, ExperimentConfig, SweepSpec};
use crate::data::Dataset;
use crate::error::{BidoError, Result};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ClassifierModel};
use crate::selftest::{run_selftest, SelftestOptions};
use crate::training::{train, BiDOConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// 2 for problems with the user's inputs, 1 for everything else.
pub fn exit_code(err: &BidoError) -> i32 {
    match err {
        BidoError::Config { .. }
        | BidoError::Parameter(_)
        | BidoError::Dimension(_)
        | BidoError::Format { .. }
        | BidoError::Consistency(_)
        | BidoError::Json(_)
        | BidoError::Io(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// A trained model with its report and held-out accuracies.
pub struct TrainedModel {
    pub model: ClassifierModel,
    pub report: TrainReport,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

/// Builds, trains and scores the model described by `config`.
pub fn train_experiment(config: &ExperimentConfig, data: &crate::config::Splits) -> Result<TrainedModel> {
    let mut model = config
        .model
        .build(data.train.input_dim(), data.train.class_count(), config.seeds().model)?;
    config.bido.validate(Some(model.tap_count()))?;
    let report = train(&mut model, &data.train, &data.val, &config.train_config(), &config.bido)?;
    let score = |d: &Dataset| -> Result<Option<f64>> {
        if d.is_empty() {
            Ok(None)
        } else {
            model.accuracy(d.inputs(), d.labels()).map(Some)
        }
    };
    let val_acc = score(&data.val)?.unwrap_or(f64::NAN);
    let test_acc = score(&data.test)?;
    Ok(TrainedModel {
        model,
        report,
        val_acc,
        test_acc,
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    val_acc: f64,
    test_acc: Option<f64>,
    final_train_loss: f64,
    final_dxz: &'a [f64],
    final_dzy: &'a [f64],
    parameter_count: usize,
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub config_echo: PathBuf,
    pub summary: PathBuf,
    pub trained: TrainedModel,
}

fn write_train_artifacts(config: &ExperimentConfig, hash: &str, trained: TrainedModel) -> Result<TrainArtifacts> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(
        &trained.model,
        &CheckpointMeta {
            seed: config.seed,
            config_hash: hash.to_string(),
        },
        &checkpoint,
    )?;
    let report_csv = dir.join("train.csv");
    trained.report.write_csv(&report_csv, hash)?;
    let config_echo = dir.join("config.json");
    fs::write(&config_echo, config.to_json())?;
    let last = trained.report.final_record().expect("at least one epoch");
    let summary = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&TrainSummary {
        config_hash: hash,
        seed: config.seed,
        epochs: trained.report.records.len(),
        best_epoch: trained.report.best_epoch,
        val_acc: trained.val_acc,
        test_acc: trained.test_acc,
        final_train_loss: last.train_loss,
        final_dxz: &last.dxz,
        final_dzy: &last.dzy,
        parameter_count: trained.model.parameter_count(),
    })?;
    fs::write(&summary, json + "\n")?;
    Ok(TrainArtifacts {
        checkpoint,
        report_csv,
        config_echo,
        summary,
        trained,
    })
}

/// `bido train --config <path>`: checkpoint, per-epoch CSV, config echo
/// and a summary JSON without timings.
pub fn cmd_train(config_path: &Path) -> Result<TrainArtifacts> {
    let (config, hash) = ExperimentConfig::load(config_path)?;
    config.validate()?;
    let data = config.splits()?;
    let trained = train_experiment(&config, &data)?;
    write_train_artifacts(&config, &hash, trained)
}

#[derive(Serialize)]
struct AttackEnvelope<'a> {
    target_config_hash: &'a str,
    evaluation_config_hash: &'a str,
}

pub struct AttackArtifacts {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub report: AttackReport,
}

fn write_attack_artifacts(
    dir: &Path,
    hash: &str,
    report: AttackReport,
    provenance: Option<AttackEnvelope<'_>>,
) -> Result<AttackArtifacts> {
    fs::create_dir_all(dir)?;
    let csv = dir.join("attack.csv");
    report.write_csv(&csv, hash)?;
    let summary = dir.join("attack_summary.json");
    let mut value: serde_json::Value = serde_json::from_str(&report.summary_json(hash)?)?;
    if let Some(p) = provenance {
        let extra = serde_json::to_value(p)?;
        if let (Some(obj), Some(add)) = (value.as_object_mut(), extra.as_object()) {
            obj.extend(add.clone());
        }
    }
    fs::write(&summary, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(AttackArtifacts { csv, summary, report })
}

fn attack_with(target: &ClassifierModel, eval: &ClassifierModel, cfg: &AttackConfig) -> Result<(Vec<crate::attack::Reconstruction>, AttackReport)> {
    if eval.input_dim() != target.input_dim() {
        return Err(BidoError::Consistency(format!(
            "target takes {} inputs, evaluation model {}",
            target.input_dim(),
            eval.input_dim()
        )));
    }
    if eval.class_count() != target.class_count() {
        return Err(BidoError::Consistency(format!(
            "target has {} classes, evaluation model {}",
            target.class_count(),
            eval.class_count()
        )));
    }
    let recon = run_attack(target, cfg)?;
    let report = evaluate_attack(&recon, target.class_count(), eval)?;
    Ok((recon, report))
}

/// `bido attack --config <path> --target <ckpt> --eval <ckpt>`: per-trial
/// CSV and summary JSON; optional raw reconstruction dumps.
pub fn cmd_attack(config_path: &Path, target: &Path, eval: &Path, dump_dir: Option<&Path>) -> Result<AttackArtifacts> {
    let (config, hash) = ExperimentConfig::load(config_path)?;
    config.validate()?;
    let (target_model, target_meta) = load_checkpoint(target)?;
    let (eval_model, eval_meta) = load_checkpoint(eval)?;
    let (recon, report) = attack_with(&target_model, &eval_model, &config.attack_config())?;
    if let Some(d) = dump_dir {
        dump_reconstructions(&recon, d)?;
    }
    write_attack_artifacts(
        &config.output_dir,
        &hash,
        report,
        Some(AttackEnvelope {
            target_config_hash: &target_meta.config_hash,
            evaluation_config_hash: &eval_meta.config_hash,
        }),
    )
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: usize,
    pub lambda_x: Option<f64>,
    pub lambda_y: Option<f64>,
    pub lambda: Option<f64>,
    pub status: String,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub attack_acc: Option<f64>,
    pub attack_acc5: Option<f64>,
    pub std_acc: Option<f64>,
    pub std_acc5: Option<f64>,
    pub error: String,
    pub config_hash: String,
}

pub struct SweepArtifacts {
    pub csv: PathBuf,
    pub rows: Vec<SweepRow>,
}

fn sweep_point(
    spec: &SweepSpec,
    i: usize,
    hash: &str,
    data: &crate::config::Splits,
    eval: &ClassifierModel,
) -> Result<(TrainedModel, AttackReport)> {
    let cfg = spec.point_config(i)?;
    let trained = train_experiment(&cfg, data)?;
    let (_, report) = attack_with(&trained.model, eval, &cfg.attack_config())?;
    let arts = write_train_artifacts(&cfg, hash, trained)?;
    write_attack_artifacts(&cfg.output_dir, hash, report.clone(), None)?;
    Ok((arts.trained, report))
}

fn evaluation_model(spec: &SweepSpec, data: &crate::config::Splits, hash: &str) -> Result<ClassifierModel> {
    if let Some(path) = &spec.evaluation.checkpoint {
        return Ok(load_checkpoint(path)?.0);
    }
    let seeds = spec.base.seeds();
    let mut model = spec
        .evaluation
        .model
        .build(data.train.input_dim(), data.train.class_count(), seeds.evaluation)?;
    let tc = crate::training::TrainConfig {
        seed: seeds.evaluation,
        ..spec.evaluation.train.clone()
    };
    train(&mut model, &data.train, &data.val, &tc, &BiDOConfig::plain())?;
    fs::create_dir_all(&spec.base.output_dir)?;
    save_checkpoint(
        &model,
        &CheckpointMeta {
            seed: spec.base.seed,
            config_hash: hash.to_string(),
        },
        &spec.base.output_dir.join("eval.ckpt"),
    )?;
    Ok(model)
}

/// `bido sweep --config <path>`: one privacy–utility row per grid point,
/// sorted by validation accuracy, failed points last with their error.
pub fn cmd_sweep(config_path: &Path) -> Result<SweepArtifacts> {
    let (spec, hash) = SweepSpec::load(config_path)?;
    spec.validate()?;
    let data = spec.base.splits()?;
    let eval = evaluation_model(&spec, &data, &hash)?;
    let pool = crate::attack::worker_pool()?;
    let results: Vec<(usize, String, Result<(TrainedModel, AttackReport)>)> = pool.install(|| {
        (0..spec.grid.len())
            .into_par_iter()
            .map(|i| {
                let point_hash = config_hash(&format!("{hash}/{i}"));
                let r = sweep_point(&spec, i, &point_hash, &data, &eval);
                (i, point_hash, r)
            })
            .collect()
    });
    let mut rows: Vec<SweepRow> = results
        .into_iter()
        .map(|(i, point_hash, r)| {
            let p = &spec.grid[i];
            let mut row = SweepRow {
                point: i,
                lambda_x: p.lambda_x,
                lambda_y: p.lambda_y,
                lambda: p.lambda,
                status: "ok".into(),
                val_acc: None,
                test_acc: None,
                attack_acc: None,
                attack_acc5: None,
                std_acc: None,
                std_acc5: None,
                error: String::new(),
                config_hash: point_hash,
            };
            match r {
                Ok((t, a)) => {
                    row.val_acc = Some(t.val_acc);
                    row.test_acc = t.test_acc;
                    row.attack_acc = Some(a.attack_acc);
                    row.attack_acc5 = Some(a.attack_acc5);
                    row.std_acc = Some(a.std_acc);
                    row.std_acc5 = Some(a.std_acc5);
                }
                Err(e) => {
                    row.status = "failed".into();
                    row.error = e.to_string();
                }
            }
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &SweepRow| r.val_acc.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.point.cmp(&b.point))
    });
    fs::create_dir_all(&spec.base.output_dir)?;
    let csv = spec.base.output_dir.join("sweep.csv");
    write_sweep_csv(&csv, &rows)?;
    Ok(SweepArtifacts { csv, rows })
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "point",
        "lambda_x",
        "lambda_y",
        "lambda",
        "status",
        "val_acc",
        "test_acc",
        "attack_acc",
        "attack_acc5",
        "std_acc",
        "std_acc5",
        "error",
        "config_hash",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.point.to_string(),
            opt(r.lambda_x),
            opt(r.lambda_y),
            opt(r.lambda),
            r.status.clone(),
            opt(r.val_acc),
            opt(r.test_acc),
            opt(r.attack_acc),
            opt(r.attack_acc5),
            opt(r.std_acc),
            opt(r.std_acc5),
            r.error.clone(),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `bido selftest`: one line per check; returns whether all passed.
pub fn cmd_selftest(options: &SelftestOptions, out: &mut dyn Write) -> Result<bool> {
    let outcomes = run_selftest(options)?;
    for c in &outcomes {
        writeln!(out, "{c}")?;
    }
    match outcomes.iter().find(|c| !c.pass) {
        Some(c) => {
            writeln!(out, "selftest failed: {}", c.name)?;
            Ok(false)
        }
        None => {
            writeln!(out, "selftest passed: {} checks", outcomes.len())?;
            Ok(true)
        }
    }
}
