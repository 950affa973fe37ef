//! Run configuration: every tunable constant in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covnet::CovNetConfig;
use crate::error::{Error, Result};
use crate::features::NormalizationBounds;
use crate::metrics::EvalConfig;
use crate::pipeline::TrackerConfig;
use crate::sim::ScenarioConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Per-entry `[min, max]` of the 18 positional scalars.
    pub bounds: NormalizationBounds,
}

/// Seeds of the ablation grid: each seed generates one evaluation scenario
/// and `train_sequences` training scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train_sequences: usize,
    /// Added to a seed to derive its training scenario seeds.
    pub train_seed_offset: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            train_sequences: 2,
            train_seed_offset: 1000,
        }
    }
}

impl AblationConfig {
    /// Scenario seeds used to train the networks evaluated on `seed`.
    pub fn train_seeds(&self, seed: u64) -> Vec<u64> {
        (0..self.train_sequences as u64)
            .map(|k| {
                self.train_seed_offset
                    .wrapping_add(seed.wrapping_mul(self.train_sequences as u64 + 1))
                    .wrapping_add(k)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub tracker: TrackerConfig,
    pub features: FeatureConfig,
    pub covnet: CovNetConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.features.bounds.validate()?;
        self.covnet.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        for s in &self.scenario.sensors {
            s.validate()?;
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.scenario.sensors.len() > self.covnet.num_cavs && !self.covnet.shared_weights {
            return Err(Error::Config(format!(
                "scenario has {} CAVs but the network config has {}",
                self.scenario.sensors.len(),
                self.covnet.num_cavs
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the canonical TOML rendering, so equal configs hash equally
    /// regardless of comments, key order or omitted defaults in the source file.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(
            self.to_toml_string()?.as_bytes(),
        )))
    }
}
