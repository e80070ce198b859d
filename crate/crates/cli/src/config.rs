//! The run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vmae_core::backbone::ModelConfig;
use vmae_core::downstream::ProbeConfig;
use vmae_core::pretrainer::TrainConfig;
use vmae_core::semantic_prior::FrozenEmbedder;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "VMAE_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    /// Precomputed embedding bank; the built-in stub is used when absent.
    pub bank: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { bank: None, seed: 7 }
    }
}

impl EmbedderConfig {
    pub fn build(&self, dim: usize) -> CliResult<FrozenEmbedder> {
        Ok(match &self.bank {
            Some(path) => FrozenEmbedder::load(path)?,
            None => FrozenEmbedder::stub(self.seed, dim)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderConfig,
    pub probe: ProbeConfig,
    pub dtype: Dtype,
    /// Dataset directory or manifest; `--data` takes precedence.
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        // serde_yaml reports the line, column and offending key
        let cfg: RunConfig =
            serde_yaml::from_str(text).map_err(|e| CliError::Config { path: path.into(), message: e.to_string() })?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?, p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed =
                v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}
