//! Run configuration: one JSON file covering the model, the pretraining
//! run, the data source, and the probe protocol. Every field has a
//! default, so a config file only needs the values it overrides;
//! unknown fields are hard errors so typos cannot silently fall back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::SEGMENT_SECONDS;
use crate::model::ModelConfig;
use crate::objectives::PretrainConfig;
use crate::probe::ProbeConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error at line {line}, column {column}: {detail}")]
    Parse { line: usize, column: usize, detail: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest path; subcommands may override it on the command line.
    pub manifest: Option<String>,
    /// Per-track cap in seconds applied when loading audio.
    pub max_seconds: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, max_seconds: 20.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.pretrain.validate().map_err(ConfigError::Invalid)?;
        self.probe.validate().map_err(ConfigError::Invalid)?;
        if !(self.data.max_seconds >= SEGMENT_SECONDS && self.data.max_seconds.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "data.max_seconds must be a finite value of at least {SEGMENT_SECONDS}"
            )));
        }
        Ok(())
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────
