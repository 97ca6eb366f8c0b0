//! TOML run configuration: corpus knobs plus pipeline knobs in one file,
//! validated as a whole so a bad config reports every problem at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusConfig;
use crate::ssl::PipelineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(String, std::io::Error),
    #[error("cannot parse {0}: {1}")]
    Parse(String, toml::de::Error),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collect every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let m = &self.pipeline.model;
        if !(0.0..=1.0).contains(&m.ctc_weight) {
            problems.push(format!("model.ctc_weight {} outside [0, 1]", m.ctc_weight));
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            problems.push(format!("model.dropout_rate {} outside [0, 1)", m.dropout_rate));
        }
        if m.feature_dim != self.corpus.feature_dim {
            problems.push(format!(
                "model.feature_dim {} does not match corpus.feature_dim {}",
                m.feature_dim, self.corpus.feature_dim
            ));
        }
        if m.subsample_factors.iter().any(|&f| f == 0) {
            problems.push("model.subsample_factors must be positive".to_string());
        }
        let (lo, hi) = self.corpus.frames_per_char;
        if lo == 0 || lo > hi {
            problems.push(format!("corpus.frames_per_char ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let (wlo, whi) = self.corpus.words_per_utt;
        if wlo == 0 || wlo > whi {
            problems.push(format!("corpus.words_per_utt ({wlo}, {whi}) must satisfy 0 < lo <= hi"));
        }
        if self.corpus.noise_sigma < 0.0 {
            problems.push("corpus.noise_sigma must be non-negative".to_string());
        }
        for hyper in [
            ("seed_hyper", &self.pipeline.seed_hyper),
            ("adapt_hyper", &self.pipeline.adapt_hyper),
            ("retrain_hyper", &self.pipeline.retrain_hyper),
        ] {
            if hyper.1.batch_size == 0 {
                problems.push(format!("pipeline.{}.batch_size must be positive", hyper.0));
            }
            if hyper.1.lr <= 0.0 {
                problems.push(format!("pipeline.{}.lr must be positive", hyper.0));
            }
        }
        if let Err(e) = self.pipeline.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }

    #[test]
    fn load_applies_defaults_for_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "master_seed = 7\n[pipeline]\nmc_samples = 4\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.pipeline.mc_samples, 4);
        assert_eq!(cfg.corpus.feature_dim, 16);
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "no_such_field = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse(_, _))));
    }

    #[test]
    fn validation_collects_multiple_problems() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.model.ctc_weight = 1.5;
        cfg.pipeline.model.dropout_rate = -0.1;
        cfg.corpus.noise_sigma = -1.0;
        cfg.pipeline.seeds.clear();
        match cfg.validate() {
            Err(ConfigError::Invalid(problems)) => {
                assert!(problems.len() >= 4, "got {problems:?}");
                assert!(problems.iter().any(|p| p.contains("ctc_weight")));
                assert!(problems.iter().any(|p| p.contains("dropout_rate")));
                assert!(problems.iter().any(|p| p.contains("noise_sigma")));
                assert!(problems.iter().any(|p| p.contains("seeds")));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn feature_dim_mismatch_is_reported() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.model.feature_dim = 8;
        match cfg.validate() {
            Err(ConfigError::Invalid(problems)) => {
                assert!(problems.iter().any(|p| p.contains("feature_dim")));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }
}
