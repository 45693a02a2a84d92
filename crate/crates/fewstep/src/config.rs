//! Run configuration: one strict JSON document wiring the dataset, model,
//! schedules, training, and generation blocks together. Unknown keys are
//! rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::sample::GenerationConfig;
use crate::schedule::NoiseSchedule;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum DataConfig {
    /// Generate a synthetic task and split it 90/5/5.
    #[serde(rename = "synthetic")]
    Synthetic(SynthSpec),
    /// Load a source<TAB>target corpus and split it 90/5/5.
    #[serde(rename = "tsv")]
    Tsv { path: PathBuf, min_freq: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory for metrics, checkpoints, vocab, and split dumps.
    pub out_dir: PathBuf,
    /// Resume training from this checkpoint instead of a fresh init.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub noise_schedule: NoiseSchedule,
    pub training: TrainConfig,
    pub generation: GenerationConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.generation.validate()?;
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.vocab != self.model.vocab {
                return Err(Error::Config(format!(
                    "synthetic vocabulary {} differs from model vocabulary {}",
                    spec.vocab, self.model.vocab
                )));
            }
        }
        Ok(())
    }
}
