//! Run configuration, read from TOML. Every field has a default, so an empty
//! file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base_learner::{BaseLearnerConfig, TrainConfig};
use crate::encoder::EncoderConfig;
use crate::ensemble::{EnsembleConfig, EnsembleTrainConfig};
use crate::error::{Error, Result};
use crate::prep::{NgramUnit, TokenizerMode};
use crate::svgp::GpConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub mode: TokenizerMode,
    pub ngram_unit: NgramUnit,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Trigram,
            ngram_unit: NgramUnit::Char,
            max_len: 128,
            vocab_size: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub pool_dim: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            pool_dim: 32,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub units: usize,
    pub inducing: usize,
    pub jitter: f64,
    pub mc_train: usize,
    pub mc_eval: usize,
}

impl Default for GpSection {
    fn default() -> Self {
        Self {
            units: 512,
            inducing: 256,
            jitter: 1e-6,
            mc_train: 16,
            mc_eval: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub learners: usize,
    pub attn_dim: usize,
    pub delta: f64,
    pub zeta: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            learners: 6,
            attn_dim: 32,
            delta: 0.001,
            zeta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub base_lr: f64,
    pub ensemble_lr: f64,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub ensemble_epochs: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            ensemble_lr: 1e-3,
            batch_size: 64,
            base_epochs: 50,
            ensemble_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Class names withheld from training entirely.
    pub unseen: Vec<String>,
    pub min_per_class: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            unseen: Vec::new(),
            min_per_class: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Train the base learners on separate threads.
    pub parallel: bool,
    pub tokenizer: TokenizerSection,
    pub encoder: EncoderSection,
    pub gp: GpSection,
    pub ensemble: EnsembleSection,
    pub optim: OptimSection,
    pub split: SplitSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tokenizer.max_len", self.tokenizer.max_len),
            ("tokenizer.vocab_size", self.tokenizer.vocab_size),
            ("gp.mc_train", self.gp.mc_train),
            ("optim.batch_size", self.optim.batch_size),
            ("optim.base_epochs", self.optim.base_epochs),
            ("optim.ensemble_epochs", self.optim.ensemble_epochs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if self.gp.mc_eval < 2 {
            return Err(Error::config("gp.mc_eval must be >= 2"));
        }
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|r| !(0.0..=1.0).contains(r))
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            return Err(Error::config("split ratios must lie in [0, 1] and sum to 1"));
        }
        if !(self.optim.base_lr > 0.0 && self.optim.ensemble_lr > 0.0) {
            return Err(Error::config("learning rates must be > 0"));
        }
        // Shape checks need a vocabulary size and class count; any valid ones do.
        self.base_learner(self.tokenizer.vocab_size + 2, 2).validate()?;
        self.ensemble_config(2).validate()
    }

    pub fn base_learner(&self, vocab_size: usize, classes: usize) -> BaseLearnerConfig {
        BaseLearnerConfig {
            encoder: EncoderConfig {
                vocab_size,
                max_len: self.tokenizer.max_len,
                dim: self.encoder.dim,
                heads: self.encoder.heads,
                layers: self.encoder.layers,
                pool_dim: self.encoder.pool_dim,
                ffn_mult: self.encoder.ffn_mult,
            },
            gp: GpConfig {
                units: self.gp.units,
                inducing: self.gp.inducing,
                jitter: self.gp.jitter,
            },
            classes,
        }
    }

    pub fn base_training(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.optim.base_lr,
            batch_size: self.optim.batch_size,
            epochs: self.optim.base_epochs,
            mc_samples: self.gp.mc_train,
        }
    }

    pub fn ensemble_config(&self, classes: usize) -> EnsembleConfig {
        EnsembleConfig {
            learners: self.ensemble.learners,
            classes,
            attn_dim: self.ensemble.attn_dim,
            delta: self.ensemble.delta,
            zeta: self.ensemble.zeta,
        }
    }

    pub fn ensemble_training(&self) -> EnsembleTrainConfig {
        EnsembleTrainConfig {
            learning_rate: self.optim.ensemble_lr,
            batch_size: self.optim.batch_size,
            epochs: self.optim.ensemble_epochs,
        }
    }
}
