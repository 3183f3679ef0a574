//! Experiment configuration files.
//!
//! A lab config is TOML with four optional tables, each falling back to its
//! defaults:
//!
//! ```toml
//! [model]      # ToyVlodConfig
//! d = 64
//! [bench]      # BenchmarkSpec
//! n_tasks = 4
//! [train]      # TrainConfig
//! steps = 30
//! [pretrain]   # PretrainConfig
//! steps = 200
//! ```

use crate::error::{LabError, Result};
use crate::harness::{PretrainConfig, TrainConfig};
use crate::model::ToyVlodConfig;
use crate::synth::BenchmarkSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub model: ToyVlodConfig,
    pub bench: BenchmarkSpec,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bench.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.model.image_size != self.bench.image_size {
            return Err(LabError::Config(format!(
                "model.image_size {} differs from bench.image_size {}",
                self.model.image_size, self.bench.image_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; equal configs hash equally
    /// whatever their TOML layout.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
