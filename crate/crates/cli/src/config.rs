use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mosra::model::ModelConfig;
use mosra::synth::CorpusConfig;
use mosra::train::{LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_mos: usize,
    pub n_acoustics: usize,
    /// Number of speech-like source files generated when no speech directory is given.
    pub speech_count: usize,
    pub speech_duration_s: f64,
    pub corpus: CorpusConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_mos: 100,
            n_acoustics: 100,
            speech_count: 20,
            speech_duration_s: 4.0,
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub speech_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

/// Everything a run needs; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
