//! Run configuration: one TOML file with a section per module.

use std::fs;
use std::path::Path;

use dn4dgs::deformnet::ModelConfig;
use dn4dgs::synthdata::SceneConfig;
use dn4dgs::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Scene used when no dataset directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub preset: String,
    pub seed: u64,
    /// Overrides the preset's initial-cloud jitter.
    pub noise_frac: Option<f64>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            seed: 0,
            noise_frac: None,
        }
    }
}

impl SceneSection {
    pub fn scene_config(&self) -> CliResult<SceneConfig> {
        let mut cfg = SceneConfig::preset(&self.preset).map_err(CliError::config)?;
        if let Some(n) = self.noise_frac {
            cfg.noise_frac = n;
        }
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub scene: SceneSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(CliError::config)?;
        self.train.schedule.validate().map_err(CliError::config)?;
        self.train.loss.validate().map_err(CliError::config)?;
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Writes the effective config as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))
    }
}
