//! Run configuration: one TOML file covering the model, schedule, loss,
//! training loop, data source, sampler, and evaluator. Parsing is strict
//! (unknown keys rejected), serialization is canonical, and the config
//! hash is the SHA-256 of the canonical form — it is embedded in every
//! output file and checkpoint for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Result, SlmError};
use crate::losses::LossKind;
use crate::predictor::PredictorConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: PredictorConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub sampling: SamplerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k: usize,
    pub s: usize,
    #[serde(default)]
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_label_dropout")]
    pub label_dropout: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

fn default_label_dropout() -> f64 {
    0.3
}

fn default_log_interval() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Corpus {
        path: PathBuf,
        #[serde(default = "default_chunk_length")]
        chunk_length: usize,
        train_end: usize,
        valid_end: usize,
    },
}

fn default_chunk_length() -> usize {
    256
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub mc_draws: usize,
    pub max_sequences: usize,
    pub seed: u64,
    pub max_states: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Mc,
            mc_draws: 4,
            max_sequences: 16,
            seed: 0,
            max_states: 1 << 24,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| SlmError::InvalidInput(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialized form; hashing and round-trips go through this.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| SlmError::InvalidInput(format!("config serialize error: {e}")))
    }

    /// SHA-256 of the canonical form, hex-encoded.
    pub fn hash(&self) -> Result<String> {
        let canon = self.to_canonical_toml()?;
        let digest = Sha256::digest(canon.as_bytes());
        Ok(hex_encode(&digest))
    }

    pub fn hash_bytes(&self) -> Result<[u8; 32]> {
        let canon = self.to_canonical_toml()?;
        Ok(Sha256::digest(canon.as_bytes()).into())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.k != self.schedule.k {
            return Err(SlmError::InvalidInput(format!(
                "model K={} disagrees with schedule K={}",
                self.model.k, self.schedule.k
            )));
        }
        if self.schedule.s == 0 {
            return Err(SlmError::InvalidInput("schedule S must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.training.label_dropout) {
            return Err(SlmError::InvalidInput(format!(
                "label_dropout {} outside [0,1]",
                self.training.label_dropout
            )));
        }
        if self.training.batch_size == 0 {
            return Err(SlmError::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.training.log_interval == 0 {
            return Err(SlmError::InvalidInput("log_interval must be >= 1".into()));
        }
        if self.sampling.steps == 0 {
            return Err(SlmError::InvalidInput("sampling steps must be >= 1".into()));
        }
        if let Some(cls) = self.sampling.cls {
            if cls >= self.model.class_count {
                return Err(SlmError::IndexOutOfRange {
                    index: cls,
                    k: self.model.class_count,
                });
            }
        }
        match &self.data {
            DataConfig::Synthetic { spec } => {
                if spec.k != self.model.k {
                    return Err(SlmError::InvalidInput(format!(
                        "data K={} disagrees with model K={}",
                        spec.k, self.model.k
                    )));
                }
                if spec.l != self.model.l {
                    return Err(SlmError::InvalidInput(format!(
                        "data L={} disagrees with model L={}",
                        spec.l, self.model.l
                    )));
                }
                if spec.class_count != self.model.class_count {
                    return Err(SlmError::InvalidInput(format!(
                        "data class_count={} disagrees with model class_count={}",
                        spec.class_count, self.model.class_count
                    )));
                }
            }
            DataConfig::Corpus {
                chunk_length,
                train_end,
                valid_end,
                ..
            } => {
                if *chunk_length != self.model.l {
                    return Err(SlmError::InvalidInput(format!(
                        "chunk_length={chunk_length} disagrees with model L={}",
                        self.model.l
                    )));
                }
                if train_end > valid_end {
                    return Err(SlmError::InvalidInput(
                        "corpus split offsets out of order".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
