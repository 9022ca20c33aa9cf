//! Run configuration in TOML.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! context_radius = 10
//! validation_fraction = 0.1
//! test_fraction = 0.2
//!
//! [model]
//! local = "attention"      # or "transformer"
//! top_k = 7
//!
//! [train]
//! window = 4               # or "L"
//! reward = "error-position"
//! gamma1 = 1e-4
//!
//! [synthetic]
//! num_docs = 200
//! anchor_fraction = 0.5
//! ```
//!
//! Every table and key is optional; missing keys take their defaults and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{PreparedDoc, DEFAULT_CONTEXT_RADIUS};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub context_radius: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            context_radius: DEFAULT_CONTEXT_RADIUS,
            validation_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        self.check_seeds()?;
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// TOML integers are signed, so seeds stop at `i64::MAX`.
    fn check_seeds(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 || self.synthetic.seed > i64::MAX as u64 {
            return Err(Error::Config("seeds must not exceed i64::MAX".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_seeds()?;
        self.train.validate()?;
        let d = &self.data;
        let fractions_ok = (0.0..1.0).contains(&d.validation_fraction)
            && (0.0..1.0).contains(&d.test_fraction)
            && d.validation_fraction + d.test_fraction < 1.0;
        if !fractions_ok {
            return Err(Error::Config(
                "validation and test fractions must leave training documents".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<PreparedDoc>,
    pub valid: Vec<PreparedDoc>,
    pub test: Vec<PreparedDoc>,
}

/// Contiguous split: training documents first, then validation, then test.
pub fn split_documents(docs: Vec<PreparedDoc>, data: &DataConfig) -> Result<Split> {
    let n = docs.len();
    let n_test = (n as f64 * data.test_fraction).round() as usize;
    let n_valid = (n as f64 * data.validation_fraction).round() as usize;
    if n_test + n_valid >= n {
        return Err(Error::Config(format!(
            "{n} documents are too few for the requested split"
        )));
    }
    let mut rest = docs;
    let test = rest.split_off(n - n_test);
    let valid = rest.split_off(n - n_test - n_valid);
    Ok(Split {
        train: rest,
        valid,
        test,
    })
}
