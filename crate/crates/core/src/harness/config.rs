use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::{OrbitMode, SynthConfig};
use crate::error::{Error, Result};

pub const TRAIN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TeacherOnly,
    StudentOnly,
    OnlineDistill,
    OfflineDistill,
}

impl TrainMode {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, TrainMode::StudentOnly)
    }

    pub fn needs_student(self) -> bool {
        !matches!(self, TrainMode::TeacherOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::TeacherOnly => "teacher_only",
            TrainMode::StudentOnly => "student_only",
            TrainMode::OnlineDistill => "online_distill",
            TrainMode::OfflineDistill => "offline_distill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Where patches come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory. Train patch `i` uses seed `i`, validation patch
    /// `j` uses seed `n_train + j`.
    Synthetic {
        synth: SynthConfig,
        n_train: usize,
        n_val: usize,
    },
    /// A dataset directory with fold assignments in its metadata.
    Directory {
        root: PathBuf,
        train_folds: Vec<usize>,
        val_folds: Vec<usize>,
        #[serde(default)]
        orbit: OrbitMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub data: DataSource,
    /// Pre-trained teacher, required by offline distillation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Run directory for checkpoints, loss log and metrics.
    pub output_dir: PathBuf,
    /// Validate every this many epochs; 0 validates only after the last one.
    #[serde(default)]
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainConfigFile {
    schema_version: u32,
    #[serde(flatten)]
    train: TrainConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.mode == TrainMode::OfflineDistill && self.teacher_checkpoint.is_none() {
            return Err(Error::Config("offline_distill needs teacher_checkpoint".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        match &self.data {
            DataSource::Synthetic { synth, n_train, .. } => {
                synth.validate()?;
                if *n_train == 0 {
                    return Err(Error::Config("n_train must be at least 1".into()));
                }
                if synth.multispec_channels != self.model.multispec_channels
                    || synth.radar_channels() != self.model.radar_channels
                    || synth.n_classes != self.model.n_classes
                {
                    return Err(Error::Config(
                        "synthetic channels or class count disagree with the model".into(),
                    ));
                }
            }
            DataSource::Directory { train_folds, .. } => {
                if train_folds.is_empty() {
                    return Err(Error::Config("train_folds is empty".into()));
                }
            }
        }
        Ok(())
    }

    /// Parses TOML, applies `key=value` overrides, then validates.
    pub fn from_toml_str(s: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(s).map_err(|e| Error::Config(format!("train config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let file: TrainConfigFile = value
            .try_into()
            .map_err(|e| Error::Config(format!("train config: {e}")))?;
        if file.schema_version != TRAIN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported train config schema_version {} (expected {TRAIN_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        file.train.validate()?;
        Ok(file.train)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = TrainConfigFile {
            schema_version: TRAIN_SCHEMA_VERSION,
            train: self.clone(),
        };
        toml::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }
}

/// Sets a dotted key, e.g. `model.lambda2=0.5` or `data.n_train=40`. The
/// value is read as a TOML literal and falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` does not address a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
