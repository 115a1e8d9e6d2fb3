//! Run configuration: one TOML document describing synthesis,
//! preprocessing, model, training, and evaluation. Unknown keys are
//! rejected. Every run echoes its effective config next to its outputs, and
//! artifacts carry FNV-1a hashes of the sections that produced them so
//! mismatched pairings are caught at load time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::records::Unit;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub unit: Unit,
    pub downsample_factor: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    /// (train, validation, test) vehicle fractions; must sum to 1.
    pub ratios: (f64, f64, f64),
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            unit: Unit::Meters,
            downsample_factor: 2,
            history_steps: 15,
            future_steps: 5,
            ratios: crate::data::split::DEFAULT_RATIOS,
            split_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample_factor must be >= 1".into()));
        }
        if self.history_steps == 0 || self.future_steps == 0 {
            return Err(Error::Config("history_steps and future_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash embedded in sample containers and checkpoints; evaluation
    /// refuses checkpoint/dataset pairs whose hashes disagree.
    pub fn data_hash(&self) -> u64 {
        let canonical = toml::to_string(self).expect("serializable config");
        fnv1a64(canonical.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Include the constant-velocity physics baseline in reports.
    pub constant_velocity: bool,
    /// Use the averaged-velocity estimate instead of the last displacement.
    pub averaged_velocity: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            constant_velocity: true,
            averaged_velocity: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: the CLI `--seed` flag overrides this and cascades into
    /// the synth, split, and training seeds.
    pub seed: u64,
    pub synth: Option<SynthConfig>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Apply the CLI master seed to every seeded stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(synth) = &mut self.synth {
            synth.seed = seed;
        }
        self.preprocess.split_seed = seed;
        self.train.seed = seed;
    }
}
