//! Experiment configuration files: UTF-8 JSON, versioned, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::{generate_synthetic, load_cifar10_binary, load_tensor_frames, Dataset, SyntheticConfig};
use crate::harness::train::OptimizerConfig;
use crate::model::ModelConfig;
use crate::pruning::{PruneConfig, PruneScope};
use crate::selector::SelectorConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    SyntheticFgBg {
        train_samples: usize,
        test_samples: usize,
        synthetic: SyntheticConfig,
    },
    Cifar10Binary {
        dir: PathBuf,
        /// Keep only the first `n` records of each split.
        limit: Option<usize>,
    },
    TensorFrames {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub selector: SelectorConfig,
    pub prune: PruneConfig,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    /// The compact synthetic setup used by the acceptance suite.
    pub fn compact() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::compact(),
            // a softer relaxation keeps the scorer learning at low keep ratios
            selector: SelectorConfig { gumbel_temperature: 2.0, ..SelectorConfig::default() },
            // global pooling empties the small-init conv and fc2 tensors first
            prune: PruneConfig { scope: PruneScope::PerLayer, ..PruneConfig::default() },
            optimizer: OptimizerConfig { learning_rate: 2e-3, epochs: 40, batch_size: 16, ..OptimizerConfig::default() },
            dataset: DatasetConfig::SyntheticFgBg { train_samples: 512, test_samples: 512, synthetic: SyntheticConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        self.model.validate()?;
        self.selector.validate()?;
        self.prune.validate()?;
        self.optimizer.validate()?;
        let m = &self.model;
        match &self.dataset {
            DatasetConfig::SyntheticFgBg { synthetic: s, .. } => {
                s.validate()?;
                if s.image_hw != m.image_hw || s.channels != m.in_channels || s.num_classes != m.num_classes {
                    return Err(Error::Config("synthetic image size, channels and classes must match the model".into()));
                }
                if s.tokens() != m.patch_tokens {
                    return Err(Error::Config(format!("synthetic grid has {} tokens, model has {}", s.tokens(), m.patch_tokens)));
                }
            }
            DatasetConfig::Cifar10Binary { .. } => {
                if m.image_hw != 32 || m.in_channels != 3 || m.num_classes != 10 {
                    return Err(Error::Config("CIFAR-10 needs a 32x32x3 model with 10 classes".into()));
                }
            }
            DatasetConfig::TensorFrames { .. } => {}
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Train and test splits. Synthetic splits are drawn from the seed.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::SyntheticFgBg { train_samples, test_samples, synthetic } => {
                let train = generate_synthetic(*train_samples, synthetic, &mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(2)))?;
                let test = generate_synthetic(*test_samples, synthetic, &mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(2) + 1))?;
                Ok((train, test))
            }
            DatasetConfig::Cifar10Binary { dir, limit } => {
                let (train, test) = load_cifar10_binary(dir)?;
                Ok(match limit {
                    Some(n) => (train.take(*n), test.take(*n)),
                    None => (train, test),
                })
            }
            DatasetConfig::TensorFrames { train, test } => Ok((load_tensor_frames(train)?, load_tensor_frames(test)?)),
        }
    }
}
