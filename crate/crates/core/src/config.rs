//! Run configuration file (TOML) shared by the training and prediction
//! commands.
//!
//! ```toml
//! version = 1
//! seed = 0
//! output_dir = "run"
//!
//! [domain]
//! dims = [64, 16, 16]
//! [domain.box]
//! min = [-3.0, -1.2, -1.2]
//! max = [3.0, 1.2, 1.2]
//!
//! [augment]
//! apply_probability = 0.75
//!
//! [model]
//! stem_channels = 16
//!
//! [train]
//! epochs = 50
//! ```
//!
//! Missing sections and keys take their defaults. `model.input_dims` always
//! follows `domain.dims`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugPolicy;
use crate::geometry::DomainSpec;
use crate::surrogate::{ModelConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub domain: DomainSpec,
    pub augment: AugPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let domain = DomainSpec::default_fleet();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("run"),
            domain,
            augment: AugPolicy::default(),
            model: ModelConfig::default().with_input_dims(domain.dims),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: cfg.version });
        }
        cfg.model.input_dims = cfg.domain.dims;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the single run seed everywhere randomness is drawn.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dims(mut self, dims: [usize; 3]) -> Self {
        self.domain = self.domain.with_dims(dims);
        self.model.input_dims = dims;
        self
    }

    /// Training settings with the run seed and augmentation policy folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.augment = self.augment.clone();
        t.augment.seed = self.seed;
        t
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.domain.validate().map_err(|e| invalid(&e))?;
        if self.model.input_dims != self.domain.dims {
            return Err(ConfigError::Invalid(format!(
                "model input dims {:?} differ from domain dims {:?}",
                self.model.input_dims, self.domain.dims
            )));
        }
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_toml(), "mem").unwrap();
        assert_eq!(cfg, back);
        back.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse(
            "version = 1\nseed = 4\n[domain]\ndims = [64, 16, 16]\n[domain.box]\nmin = [-3.0, -1.2, -1.2]\nmax = [3.0, 1.2, 1.2]\n[train]\nepochs = 5\n",
            "mem",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.input_dims, [64, 16, 16]);
        assert_eq!(cfg.train_config().seed, 4);
        assert_eq!(cfg.train_config().augment.seed, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn version_and_unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("version = 2", "mem"), Err(ConfigError::Version { found: 2 })));
        assert!(matches!(RunConfig::parse("version = 1\nsed = 3", "mem"), Err(ConfigError::Parse { .. })));
    }
}
