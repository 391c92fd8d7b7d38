//! Run configuration: one TOML document with every hyperparameter of a run.
//!
//! ```toml
//! [schedule]        # steps, beta_start, beta_end
//! [generator]       # see GeneratorConfig
//! [discriminator]   # see DiscriminatorConfig
//! [style]           # see StyleEncoderConfig
//! [train]           # seed, optimizer, steps, batch size, loss weights
//! [data]            # train / eval dataset directories
//! ```
//!
//! Sections may be omitted (defaults apply); unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::engine::{ModelConfig, TrainConfig};
use crate::error::{io_err, Error, Result};
use crate::generator::GeneratorConfig;
use crate::schedule::ScheduleConfig;
use crate::style::StyleEncoderConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub style: StyleEncoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_model(ModelConfig::desk())
    }
}

impl RunConfig {
    pub fn from_model(m: ModelConfig) -> Self {
        Self {
            schedule: m.schedule,
            generator: m.generator,
            discriminator: m.discriminator,
            style: m.style,
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            schedule: self.schedule,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            style: self.style.clone(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()
    }

    /// Strict parse followed by validation.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Toml(inner) => Error::Config(format!("{}: {inner}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        for m in [ModelConfig::desk(), ModelConfig::micro(), ModelConfig::full()] {
            let mut cfg = RunConfig::from_model(m);
            cfg.train.seed = 42;
            cfg.data.train = Some("data/train".into());
            let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_documents_use_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nseed = 3\nmax_steps = 10\n").unwrap();
        assert_eq!(cfg.seed(), 3);
        assert_eq!(cfg.train.max_steps, 10);
        assert_eq!(cfg.model(), ModelConfig::desk());
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nmax_step = 10\n").is_err());
        assert!(RunConfig::from_toml_str("[schedule]\nsteps = 4\nbeta_start = 0.1\nbeta_end = 0.7\nbeta_mid = 0.3\n")
            .is_err());
        assert!(RunConfig::from_toml_str("[trian]\n").is_err());
        assert!(RunConfig::from_toml_str("[generator]\nmel_bins = 40\n").is_err());
    }
}
