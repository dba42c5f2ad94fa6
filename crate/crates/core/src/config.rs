//! Aggregated run configuration for the CLI: one JSON document with strict
//! unknown-key rejection covering data generation, model, training,
//! evaluation and projection settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::tsne::TsneConfig;

/// Environment variable overriding every seed in the config when set.
pub const SEED_ENV: &str = "TSM_SEED";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: crate::evaluator::DEFAULT_K,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub tsne: TsneConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.k < 1 {
            return Err(Error::Config("eval.k must be >= 1".into()));
        }
        if self.model.num_classes != self.dataset.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes {} != dataset.num_classes {}",
                self.model.num_classes, self.dataset.num_classes
            )));
        }
        if self.model.stream_channels.as_slice() != self.dataset.channels.as_slice() {
            return Err(Error::Config(format!(
                "model.stream_channels {:?} != dataset.channels {:?}",
                self.model.stream_channels, self.dataset.channels
            )));
        }
        if self.train.p > self.dataset.num_classes {
            return Err(Error::Config(format!(
                "train.p {} exceeds dataset.num_classes {}",
                self.train.p, self.dataset.num_classes
            )));
        }
        Ok(())
    }

    /// Apply the `TSM_SEED` override to every component seed.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be a u64, got '{raw}'")))?;
            self.override_seeds(seed);
        }
        Ok(())
    }

    pub fn override_seeds(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.tsne.seed = seed;
    }
}

/// Parse and validate a run config file; JSON errors keep serde's
/// line/column information.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.apply_seed_env()?;
    cfg.validate()?;
    Ok(cfg)
}
