//! JSON run configuration with sections `model`, `bounds`, `npag` and `sim`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NpagError, Result};
use crate::models::{ModelSpec, ParameterSpace, PopulationModel};
use crate::npag::NpagConfig;
use crate::simulate::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    Warn,
    #[default]
    Info,
    Debug,
}

impl Verbosity {
    pub fn level(self) -> log::LevelFilter {
        match self {
            Verbosity::Quiet => log::LevelFilter::Error,
            Verbosity::Warn => log::LevelFilter::Warn,
            Verbosity::Info => log::LevelFilter::Info,
            Verbosity::Debug => log::LevelFilter::Debug,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub bounds: ParameterSpace,
    #[serde(default)]
    pub npag: NpagConfig,
    #[serde(default)]
    pub sim: SimConfig,
    /// Output directory used when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub verbosity: Verbosity,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| NpagError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NpagError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            NpagError::Config(msg) => NpagError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.npag.validate()?;
        self.sim.validate()?;
        self.population_model().map(|_| ())
    }

    pub fn population_model(&self) -> Result<PopulationModel> {
        PopulationModel::new(self.model.clone(), self.bounds.clone()).map_err(|e| NpagError::Config(e.to_string()))
    }
}
