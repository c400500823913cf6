//! Model and training configuration. Defaults are the full-scale settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Group;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub encoder_layers: usize,
    pub compressor_layers: usize,
    pub skip_connections: bool,
    /// Encoder and compressor read one embedding table indexed by the
    /// encoder vocabulary; the compressor vocabulary then equals it.
    pub share_embeddings: bool,
    /// Sizes include the four reserved symbols.
    pub encoder_vocab_size: usize,
    pub compressor_vocab_size: usize,
    pub decoder_vocab_size: usize,
    pub min_count: usize,
    pub baseline_hidden: usize,
    /// Compressions stop after `ceil(ratio * |s|)` words (at least `min_cap`).
    pub max_compression_ratio: f64,
    pub min_compression_cap: usize,
    /// Half-width of the uniform weight initialisation.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            hidden_dim: 256,
            attention_dim: 256,
            encoder_layers: 3,
            compressor_layers: 3,
            skip_connections: true,
            share_embeddings: false,
            encoder_vocab_size: 119_506 + 4,
            compressor_vocab_size: 68_897 + 4,
            decoder_vocab_size: 10_000 + 4,
            min_count: 1,
            baseline_hidden: 256,
            max_compression_ratio: 0.6,
            min_compression_cap: 2,
            init_scale: crate::tensor::INIT_SCALE,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale experiments.
    pub fn tiny(dim: usize) -> Self {
        ModelConfig {
            embed_dim: dim,
            hidden_dim: dim,
            attention_dim: dim,
            encoder_layers: 1,
            compressor_layers: 1,
            baseline_hidden: dim,
            ..ModelConfig::default()
        }
    }

    pub fn max_compression_len(&self, source_len: usize) -> usize {
        let cap = (self.max_compression_ratio * source_len as f64).ceil() as usize;
        cap.max(self.min_compression_cap)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.hidden_dim,
            self.attention_dim,
            self.encoder_layers,
            self.compressor_layers,
            self.baseline_hidden,
            self.min_compression_cap,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(
                "model dimensions and layer counts must be positive",
            ));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init_scale must be positive and finite"));
        }
        if !(self.max_compression_ratio > 0.0) {
            return Err(Error::invalid("max_compression_ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            embed_dim: 256,
            hidden_dim: 256,
            layers: 3,
            dropout: 0.5,
            vocab_size: 68_897 + 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FscOnly,
    AscOnly,
    Joint,
}

impl Mode {
    pub fn uses_labelled(self) -> bool {
        matches!(self, Mode::FscOnly | Mode::Joint)
    }

    pub fn uses_unlabelled(self) -> bool {
        matches!(self, Mode::AscOnly | Mode::Joint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Step size for the baseline group; `None` uses `learning_rate`.
    /// Baselines must track a learning signal tens of nats from zero, which
    /// the shared step size reaches only after many thousands of updates.
    pub baseline_learning_rate: Option<f64>,
}

impl AdamConfig {
    pub fn rate(&self, group: Group) -> f64 {
        match (group, self.baseline_learning_rate) {
            (Group::Baseline, Some(lr)) => lr,
            _ => self.learning_rate,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            baseline_learning_rate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub lambda: f64,
    pub samples: usize,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub epochs: usize,
    /// Unlabelled batches drawn per labelled batch in joint mode.
    pub unlabelled_per_labelled: usize,
    pub beam_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: Mode::Joint,
            batch_size: 64,
            lambda: 0.1,
            samples: 1,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            epochs: 5,
            unlabelled_per_labelled: 1,
            beam_size: 5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples must be at least 1"));
        }
        if self.beam_size == 0 {
            return Err(Error::invalid("beam_size must be at least 1"));
        }
        if self.unlabelled_per_labelled == 0 {
            return Err(Error::invalid("unlabelled_per_labelled must be at least 1"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}
