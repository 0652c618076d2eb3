//! Run configuration: one TOML file covering the model, LoRA, training, and
//! data locations. Every field has a default, so a config file only states
//! deviations; command-line flags override file values, which override
//! defaults. The resolved configuration is echoed into run outputs for
//! provenance.
//!
//! Schema (all sections optional):
//!
//! ```toml
//! apply_lora = true
//!
//! [model]        # toy segmenter architecture
//! num_classes = 3
//! resolution = [48, 48]
//!
//! [lora]
//! rank = 4
//!
//! [train]        # optimization, augmentation, ablations
//! total_iterations = 10000
//! [train.loss]
//! lambda1 = 0.4
//! [train.ablation]
//! vanilla_cps = false
//!
//! [data]
//! manifest = "data/manifest.json"
//! out_dir = "runs/exp1"
//! ```

use crate::model::{LoraConfig, ToyModelConfig};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Dataset locations; CLI flags take precedence over these.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// The merged run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ToyModelConfig,
    /// Apply low-rank adapters to the encoder and freeze its base weights.
    pub apply_lora: bool,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ToyModelConfig::default(),
            apply_lora: true,
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.apply_lora && self.lora.rank == 0 {
            return Err(ConfigError::Invalid("lora.rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse and validate a TOML run configuration.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let cfg: RunConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
