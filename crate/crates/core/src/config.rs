//! Run configuration, read from TOML.
//!
//! ```toml
//! [model]    # body = "path/to/model.json" (toy model when absent)
//! [flow]     # blocks, hidden
//! [encoder]  # feature, context, window, levels, centre_bias
//! [disc]     # hidden, layers
//! [train]    # epochs, batch, T, lr, seed, sample_count, freeze_encoder, ...
//! [loss]     # the nine term weights
//! [fit]      # lambda_j, lambda_v, lambda_beta, lr, max_iters, tol
//! [data]     # synthetic generator settings
//! ```
//!
//! Every section and key is optional. Unknown keys inside a known section
//! are rejected; unknown sections are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::discriminator::DiscConfig;
use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::losses::LossWeights;
use crate::temporal_encoder::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Body model file; the bundled toy model when absent.
    pub body: Option<PathBuf>,
    /// Hidden width of the observation encoder.
    pub obs_hidden: usize,
    /// Hidden width of the shape/camera head.
    pub head_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            body: None,
            obs_hidden: 64,
            head_hidden: 64,
        }
    }
}

/// Flow sizes not implied by the body model and encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub blocks: usize,
    pub hidden: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { blocks: 4, hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Frames per training window.
    #[serde(rename = "T")]
    pub frames: usize,
    pub lr: f64,
    pub seed: u64,
    /// Flow samples drawn per window for the expectation terms.
    pub sample_count: usize,
    /// Keeps the observation encoder at its initialization.
    pub freeze_encoder: bool,
    /// Share of sequences held out for validation.
    pub val_fraction: f64,
    /// Sequences generated when no dataset file is given.
    pub sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            frames: 16,
            lr: 5e-5,
            seed: 0,
            sample_count: 2,
            freeze_encoder: false,
            val_fraction: 0.1,
            sequences: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.frames < 2 || self.sample_count == 0 {
            return Err(Error::Config("train: batch, sample_count must be >= 1 and T >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train: lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("train: val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelSection,
    pub flow: FlowSection,
    pub encoder: EncoderConfig,
    pub disc: DiscConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub fit: FitConfig,
    pub data: GeneratorConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.fit.validate()?;
        self.data.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_and_extras() {
        let cfg = Config::from_toml("[train]\nepochs = 3\nT = 8\n[notes]\nwho = \"me\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.frames, 8);
        assert_eq!(cfg.train.batch, 32);
        assert!(Config::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(Config::from_toml("[train]\nlr = -1.0\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
