//! Run configuration: one JSON file with a section per stage.

use std::path::Path;

use jolt_core::model::ModelConfig;
use jolt_core::pipeline::{InferConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::formats::{read_json, write_json};

pub const SEED_ENV: &str = "JOLT_SEED";
pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => read_json(p).map_err(|e| Error::Config(e.to_string())),
            None => Ok(RunConfig::default()),
        }
    }

    /// Applies a root seed to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.corpus.seed = seed;
        self
    }

    /// `JOLT_SEED`, when set, overrides the seeds from the file.
    pub fn apply_env(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.corpus.validate()?;
        if !(self.infer.threshold >= 0.0 && self.infer.threshold <= 1.0) {
            return Err(Error::Config("infer.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(SNAPSHOT_FILE), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epochs": 2}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 2}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainer": {}}"#).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = RunConfig::default().with_seed(11);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!((cfg.train.seed, cfg.corpus.seed), (11, 11));
    }
}
