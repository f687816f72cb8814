//! Run configuration: one JSON document covering data, split, model, and
//! training. Every seed must be written out explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{TrainConfig, WeightPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub rho: f64,
    pub est_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            rho: 0.05,
            est_fraction: 0.2,
            seed: 1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("split.rho", format!("must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.est_fraction > 0.0 && self.est_fraction < 1.0) {
            return Err(Error::config(
                "split.est_fraction",
                format!("must lie in (0, 1), got {}", self.est_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training seeds for `compare-policies`.
    pub seeds: Vec<u64>,
    pub policies: Vec<WeightPolicy>,
    /// Save a checkpoint every this many main epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GenConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            policies: WeightPolicy::ALL.to_vec(),
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

const REQUIRED_SEEDS: [(&str, &str); 3] = [("data", "seed"), ("split", "seed"), ("train", "seed")];

impl RunConfig {
    /// Parses and validates. Unknown keys and missing seeds are errors.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "run config".into(),
            reason: e.to_string(),
        })?;
        for (section, key) in REQUIRED_SEEDS {
            if raw.get(section).and_then(|s| s.get(key)).is_none() {
                return Err(Error::config(format!("{section}.{key}"), "seeds must be set explicitly"));
            }
        }
        let cfg: RunConfig = serde_json::from_value(raw).map_err(|e| Error::Format {
            what: "run config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_dim != self.data.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!("{} differs from data.input_dim {}", self.model.input_dim, self.data.input_dim),
            ));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!("{} differs from data.num_classes {}", self.model.num_classes, self.data.num_classes),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.policies.is_empty() {
            return Err(Error::config("policies", "need at least one policy"));
        }
        Ok(())
    }

    /// Every field, defaults included.
    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.snapshot_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}
