//! One self-describing TOML config file per run.
//!
//! Sections: `[encoder]`, `[aggregation]`, `[pipeline]`, `[train]`,
//! `[loss]`, `[data]`. Every field has a documented default; unknown keys
//! are rejected. The canonical serialization of the parsed config is hashed
//! into checkpoints so a run can always be traced back to its settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agg::AggConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::pipeline::{ModelConfig, PipelineConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub bce: f64,
    pub iou: f64,
    pub occ: f64,
    /// Uniform SSIM window for the cycle loss (shrinks to fit tiny stages).
    pub ssim_window: usize,
    /// Mask the cycle loss to co-salient pixels; `false` is the full-pixel
    /// ablation.
    pub object_aware: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { bce: 1.0, iou: 1.0, occ: 0.1, ssim_window: 3, object_aware: true }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { bce: self.bce, iou: self.iou, occ: self.occ }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Images per group.
    pub n: usize,
    /// Square image size (pixels).
    pub size: usize,
    /// Group count for synthesis.
    pub groups: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n: 6, size: 64, groups: 4 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub aggregation: AggConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut enc = self.encoder.clone();
        enc.input_size = (self.data.size, self.data.size);
        enc.validate()?;
        self.aggregation.validate()?;
        self.pipeline.validate()?;
        self.train.validate()?;
        if self.data.n < 2 {
            return Err(Error::Config("data.n must be >= 2".into()));
        }
        if self.loss.ssim_window.is_multiple_of(2) {
            return Err(Error::Config("loss.ssim_window must be odd".into()));
        }
        Ok(())
    }

    /// The model-facing slice of the config; the encoder input size follows
    /// `data.size`.
    pub fn model_config(&self) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        encoder.input_size = (self.data.size, self.data.size);
        ModelConfig {
            encoder,
            agg: self.aggregation.clone(),
            pipeline: self.pipeline.clone(),
        }
    }

    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
