//! Versioned JSON experiment configuration.
//!
//! Unknown fields are rejected everywhere. Every random choice derives from
//! the single top-level `seed`; the hash of the canonical serialization is
//! written into every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::{load_mnist_idx, split, synthetic_blobs, synthetic_digits, Dataset};
use crate::error::{BidoError, Result};
use crate::model::Architecture;
use crate::training::{BiDOConfig, Mode, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Paths are resolved relative to the config file.
    MnistIdx { images: PathBuf, labels: PathBuf },
    SyntheticBlobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    SyntheticDigits { per_class: usize, side: usize },
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

fn default_architecture() -> Architecture {
    Architecture::default()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Train / validation / test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_architecture")]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    pub bido: BiDOConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Resolved relative to the config file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Seeds derived from the top-level seed, one per purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub model: u64,
    pub train: u64,
    pub attack: u64,
    pub evaluation: u64,
}

impl Seeds {
    pub fn derive(root: u64) -> Self {
        let at = |k: u64| root.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        Seeds {
            data: at(1),
            split: at(2),
            model: at(3),
            train: at(4),
            attack: at(5),
            evaluation: at(6),
        }
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let field = e.to_string();
            BidoError::config("config", field)
        })
    }

    /// Reads a config and resolves relative paths against its directory.
    /// The hash is taken before resolution, so it does not depend on where
    /// the file lives.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let hash = cfg.hash();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok((cfg, hash))
    }

    pub fn rebase(&mut self, base: &Path) {
        self.output_dir = resolve(base, &self.output_dir);
        if let DatasetSpec::MnistIdx { images, labels } = &mut self.dataset {
            *images = resolve(base, images);
            *labels = resolve(base, labels);
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    /// Checks every section and reports the first offending field.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(BidoError::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.split.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || self.split[0] <= 0.0 {
            return Err(BidoError::config("split", "fractions must be nonnegative with a positive training share"));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(BidoError::config("split", "fractions must sum to 1"));
        }
        if self.train.seed != 0 {
            return Err(BidoError::config("train.seed", "seeds derive from the top-level `seed`"));
        }
        if self.attack.seed != 0 {
            return Err(BidoError::config("attack.seed", "seeds derive from the top-level `seed`"));
        }
        self.train.validate()?;
        self.bido.validate(None)?;
        self.attack.validate()?;
        match &self.dataset {
            DatasetSpec::SyntheticBlobs { classes, per_class, dim, separation } => {
                if *classes < 2 || *per_class == 0 || *dim == 0 || !(separation.is_finite() && *separation > 0.0) {
                    return Err(BidoError::config("dataset", "blob sizes must be positive with at least 2 classes"));
                }
            }
            DatasetSpec::SyntheticDigits { per_class, side } => {
                if *per_class == 0 || *side < 8 {
                    return Err(BidoError::config("dataset", "digits need per_class ≥ 1 and side ≥ 8"));
                }
            }
            DatasetSpec::MnistIdx { .. } => {}
        }
        Ok(())
    }

    /// Training config with the derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            ..self.train.clone()
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            seed: self.seeds().attack,
            ..self.attack.clone()
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let seed = self.seeds().data;
        match &self.dataset {
            DatasetSpec::MnistIdx { images, labels } => load_mnist_idx(images, labels),
            DatasetSpec::SyntheticBlobs { classes, per_class, dim, separation } => {
                synthetic_blobs(*classes, *per_class, *dim, *separation, seed)
            }
            DatasetSpec::SyntheticDigits { per_class, side } => synthetic_digits(*per_class, *side, seed),
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        let data = self.load_dataset()?;
        let (train, val, test) = split(&data, self.split, self.seeds().split)?;
        Ok(Splits { train, val, test })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serializes"))
    }
}

pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One grid point: `(lambda_x, lambda_y)` for bilateral bases, `lambda`
/// for unilateral ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// How the sweep obtains its evaluation classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Existing checkpoint; when absent a plain model is trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_architecture")]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub version: u32,
    pub base: ExperimentConfig,
    pub grid: Vec<GridPoint>,
    pub evaluation: EvaluationSpec,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let mut spec: SweepSpec = serde_json::from_str(&text).map_err(|e| BidoError::config("config", e.to_string()))?;
        let hash = spec.hash();
        let base = path.parent().unwrap_or(Path::new("."));
        spec.base.rebase(base);
        if let Some(c) = &mut spec.evaluation.checkpoint {
            *c = resolve(base, c);
        }
        Ok((spec, hash))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(BidoError::config("version", format!("unsupported version {}", self.version)));
        }
        self.base.validate()?;
        if self.grid.is_empty() {
            return Err(BidoError::config("grid", "needs at least one point"));
        }
        self.evaluation.train.validate()?;
        for (i, _) in self.grid.iter().enumerate() {
            self.point_config(i)?.validate()?;
        }
        Ok(())
    }

    /// The base config with grid point `i` applied.
    pub fn point_config(&self, i: usize) -> Result<ExperimentConfig> {
        let p = &self.grid[i];
        let mut cfg = self.base.clone();
        let field = |name: &str| format!("grid[{i}].{name}");
        match cfg.bido.mode {
            Mode::Bilateral => {
                if p.lambda.is_some() {
                    return Err(BidoError::config(field("lambda"), "bilateral sweeps take lambda_x and lambda_y"));
                }
                cfg.bido.lambda_x = Some(p.lambda_x.ok_or_else(|| BidoError::config(field("lambda_x"), "missing"))?);
                cfg.bido.lambda_y = Some(p.lambda_y.ok_or_else(|| BidoError::config(field("lambda_y"), "missing"))?);
            }
            Mode::UnilateralXy => {
                cfg.bido.lambda = Some(p.lambda.ok_or_else(|| BidoError::config(field("lambda"), "missing"))?);
            }
            Mode::Plain => return Err(BidoError::config("base.bido.mode", "a sweep needs a regularized base")),
        }
        cfg.output_dir = self.base.output_dir.join(format!("point_{i:03}"));
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("sweep serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BLOBS: &str = r#"{
        "version": 1, "seed": 3,
        "dataset": {"kind": "synthetic_blobs", "classes": 2, "per_class": 20, "dim": 3, "separation": 0.5},
        "bido": {"mode": "bilateral", "measure": {"measure": "hsic"}, "lambda_x": 0.1, "lambda_y": 1.0}
    }"#;

    #[test]
    fn parses_with_defaults_and_round_trips() {
        let cfg = ExperimentConfig::from_json(BLOBS).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attack, AttackConfig::default());
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let typo = BLOBS.replace("\"lambda_y\"", "\"lamda_y\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(BidoError::Config { .. })));
    }

    #[test]
    fn missing_lambda_y_is_named() {
        let cfg = ExperimentConfig::from_json(&BLOBS.replace(", \"lambda_y\": 1.0", "")).unwrap();
        match cfg.validate() {
            Err(BidoError::Config { field, .. }) => assert!(field.contains("lambda_y"), "{field}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_changes_with_config() {
        let a = ExperimentConfig::from_json(BLOBS).unwrap();
        let mut b = a.clone();
        b.bido.lambda_x = Some(0.2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn seeds_differ_per_purpose_and_root() {
        let s = Seeds::derive(0);
        let all = [s.data, s.split, s.model, s.train, s.attack, s.evaluation];
        for i in 0..all.len() {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(Seeds::derive(1).train, s.train);
    }

    #[test]
    fn explicit_sub_seeds_are_rejected() {
        let mut cfg = ExperimentConfig::from_json(BLOBS).unwrap();
        cfg.train.seed = 9;
        assert!(matches!(cfg.validate(), Err(BidoError::Config { field, .. }) if field == "train.seed"));
    }

    #[test]
    fn sweep_points_apply_weights() {
        let spec: SweepSpec = serde_json::from_str(&format!(
            r#"{{"version": 1, "base": {BLOBS}, "grid": [{{"lambda_x": 0, "lambda_y": 0}}, {{"lambda_x": 2, "lambda_y": 20}}],
               "evaluation": {{"model": {{"kind": "mlp", "hidden": [8]}}}}}}"#
        ))
        .unwrap();
        spec.validate().unwrap();
        let p = spec.point_config(1).unwrap();
        assert_eq!(p.bido.lambdas(), (2.0, 20.0));
        assert!(p.output_dir.ends_with("point_001"));
        let bad: SweepSpec = serde_json::from_str(&format!(
            r#"{{"version": 1, "base": {BLOBS}, "grid": [], "evaluation": {{}}}}"#
        ))
        .unwrap();
        assert!(bad.validate().is_err());
    }
}
