//! Run configuration file (JSON, strict).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vega_core::corruption::CorruptionConfig;
use vega_core::finetune::{AdvConfig, FinetuneHyper};
use vega_core::pretrain::{CorpusConfig, PretrainSchedule};
use vega_core::{EncoderConfig, Error, Result};

pub const SEED_ENV: &str = "VEGA_SEED";

/// Optional file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Loss or audit log (JSONL).
    pub log: Option<PathBuf>,
}

/// Every tunable of a run. Missing fields take their defaults, unknown ones
/// are rejected. The top-level `seed` drives every random stream and replaces
/// the seeds of the nested sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub corruption: CorruptionConfig,
    pub corpus: CorpusConfig,
    /// Sentences in the synthetic corpus used when no corpus file is given.
    pub corpus_size: usize,
    pub pretrain: PretrainSchedule,
    pub finetune: FinetuneHyper,
    pub adversarial: AdvConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder: EncoderConfig {
                vocab_size: 1000,
                ..EncoderConfig::toy()
            },
            corruption: CorruptionConfig::default(),
            corpus: CorpusConfig::default(),
            corpus_size: 2000,
            pretrain: PretrainSchedule::default(),
            finetune: FinetuneHyper::default(),
            adversarial: AdvConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Reads `path` (defaults when `None`), then applies the seed override
    /// from `VEGA_SEED` and finally `seed_flag`.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        if let Some(s) = seed_flag {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        self.corruption.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.corruption.validate()?;
        self.pretrain.validate()?;
        self.adversarial.validate()?;
        if self.corpus_size == 0 {
            return Err(Error::Config("corpus_size must be at least 1".into()));
        }
        Ok(())
    }
}
