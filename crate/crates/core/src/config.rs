//! Model configuration and pyramid shape algebra.
//!
//! A model config file is TOML with a mandatory `schema_version` key and the
//! fields of [`ModelConfig`]; see the README for the full key list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// How per-level modality summary maps are formed from the head-wise attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    /// Mean of the softmax-normalized weights over time and heads.
    Literal,
    /// Mean of `sigmoid(raw score)` over time and heads.
    Presoftmax,
}

/// Gate activation used by the single-frame student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Softmax over a single time step: every gate is 1.
    Ones,
    Sigmoid,
}

/// Reduction used by the feature-matching loss at each pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillNorm {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionThresholds {
    /// Minimum heatmap value for a peak to become a detection.
    pub confidence: f64,
    pub top_k: usize,
    /// Threshold applied to decoded shape patches when pasting instances.
    pub mask: f64,
}

impl Default for DetectionThresholds {
    fn default() -> Self {
        Self {
            confidence: 0.3,
            top_k: 64,
            mask: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_levels: usize,
    pub channels: Vec<usize>,
    pub n_heads: usize,
    pub shape_patch_size: usize,
    /// Crop classes, excluding background (0) and void (`n_classes + 1`).
    pub n_classes: usize,
    pub multispec_channels: usize,
    pub radar_channels: usize,
    pub key_dim: usize,
    pub date_encoding_dim: usize,
    pub head_channels: usize,
    pub shape_feature_channels: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub summary_mode: SummaryMode,
    pub singleton_gate: GateMode,
    pub distill_norm: DistillNorm,
    pub detection: DetectionThresholds,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_levels: 4,
            channels: vec![64, 64, 64, 128],
            n_heads: 4,
            shape_patch_size: 16,
            n_classes: 18,
            multispec_channels: 10,
            radar_channels: 6,
            key_dim: 8,
            date_encoding_dim: 16,
            head_channels: 128,
            shape_feature_channels: 8,
            lambda1: 1.0,
            lambda2: 1.0,
            beta: 4.0,
            summary_mode: SummaryMode::Presoftmax,
            singleton_gate: GateMode::Sigmoid,
            distill_norm: DistillNorm::Mean,
            detection: DetectionThresholds::default(),
            seed: 0,
        }
    }
}

/// Shape of one pyramid level, `[channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelConfigFile {
    schema_version: u32,
    #[serde(flatten)]
    model: ModelConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 {
            return Err(Error::Config("n_levels must be at least 1".into()));
        }
        if self.channels.len() != self.n_levels {
            return Err(Error::Config(format!(
                "channels has {} entries but n_levels is {}",
                self.channels.len(),
                self.n_levels
            )));
        }
        if self.n_heads == 0 {
            return Err(Error::Config("n_heads must be at least 1".into()));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.n_heads != 0 {
                return Err(Error::Config(format!(
                    "channels at level {} ({c}) not divisible by n_heads ({})",
                    i + 1,
                    self.n_heads
                )));
            }
        }
        if self.shape_patch_size == 0 {
            return Err(Error::Config("shape_patch_size must be at least 1".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        if self.multispec_channels == 0 || self.radar_channels == 0 {
            return Err(Error::Config("input channel counts must be positive".into()));
        }
        if self.key_dim == 0 || self.head_channels == 0 || self.shape_feature_channels == 0 {
            return Err(Error::Config("key_dim, head_channels and shape_feature_channels must be positive".into()));
        }
        if !self.head_channels.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "head_channels ({}) not divisible by n_heads ({})",
                self.head_channels, self.n_heads
            )));
        }
        if !self.date_encoding_dim.is_multiple_of(2) {
            return Err(Error::Config("date_encoding_dim must be even".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        let d = &self.detection;
        if !(0.0..=1.0).contains(&d.confidence) || !(0.0..=1.0).contains(&d.mask) {
            return Err(Error::Config("detection thresholds must lie in [0, 1]".into()));
        }
        if d.top_k == 0 {
            return Err(Error::Config("detection.top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Semantic label reserved for void pixels.
    pub fn void_class(&self) -> u32 {
        self.n_classes as u32 + 1
    }

    /// Spatial side lengths must be divisible by this factor.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.n_levels - 1)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: ModelConfigFile =
            toml::from_str(s).map_err(|e| Error::Config(format!("model config: {e}")))?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported model config schema_version {} (expected {MODEL_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = ModelConfigFile {
            schema_version: MODEL_SCHEMA_VERSION,
            model: self.clone(),
        };
        toml::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }
}

/// Per-level `(C_l, H_l, W_l)` with `H_l = H / 2^(l-1)`, finest level first.
pub fn pyramid_shapes(config: &ModelConfig, height: usize, width: usize) -> Result<Vec<LevelShape>> {
    if config.channels.len() < config.n_levels {
        return Err(Error::Config("fewer channel widths than levels".into()));
    }
    let mut shapes = Vec::with_capacity(config.n_levels);
    for level in 1..=config.n_levels {
        let factor = 1usize << (level - 1);
        if !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(Error::Dimension(format!(
                "input {height}x{width} not divisible by {factor} at level {level}"
            )));
        }
        shapes.push(LevelShape {
            channels: config.channels[level - 1],
            height: height / factor,
            width: width / factor,
        });
    }
    Ok(shapes)
}
