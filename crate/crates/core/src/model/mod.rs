//! Factored encoder-decoder transformer with hand-written backpropagation.

mod checkpoint;
mod layers;
mod params;
pub mod tensor;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::annotate::Factor;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::Ctx;
pub use params::{Init, ParamId, ParamSet};
pub use tensor::Mat;
pub use train::{corpus_loss, train, AdamState, EpochRecord, TrainConfig, TrainState};
pub use transformer::{DecoderState, EncodedSource, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_size: usize,
    pub num_layers_enc: usize,
    pub num_layers_dec: usize,
    pub attention_heads: usize,
    pub feed_forward_hidden: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub factor_embed_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(0)
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            model_size: 128,
            num_layers_enc: 2,
            num_layers_dec: 2,
            attention_heads: 4,
            feed_forward_hidden: 256,
            dropout: 0.1,
            label_smoothing: 0.1,
            factor_embed_size: 8,
            vocab_size,
            max_seq_len: 64,
            seed: 1,
        }
    }

    /// Shape used for the full-scale systems.
    pub fn standard(vocab_size: usize) -> Self {
        ModelConfig {
            model_size: 512,
            num_layers_enc: 2,
            num_layers_dec: 2,
            attention_heads: 8,
            feed_forward_hidden: 2048,
            dropout: 0.1,
            label_smoothing: 0.1,
            factor_embed_size: 16,
            vocab_size,
            max_seq_len: 101,
            seed: 1,
        }
    }

    /// Width of the word part of a source embedding.
    pub fn word_embed_size(&self) -> usize {
        self.model_size - self.factor_embed_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor_embed_size == 0 || self.factor_embed_size >= self.model_size {
            return Err(Error::invalid(format!(
                "factor_embed_size must be in [1, model_size), got {} with model_size {}",
                self.factor_embed_size, self.model_size
            )));
        }
        if self.attention_heads == 0 || !self.model_size.is_multiple_of(self.attention_heads) {
            return Err(Error::invalid(format!(
                "model_size {} is not divisible by attention_heads {}",
                self.model_size, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::invalid(format!(
                "vocab_size {} leaves no room for real tokens",
                self.vocab_size
            )));
        }
        if self.num_layers_enc == 0 || self.num_layers_dec == 0 || self.feed_forward_hidden == 0 {
            return Err(Error::invalid("layer counts and feed_forward_hidden must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::invalid("max_seq_len must be positive"));
        }
        Ok(())
    }
}

/// One training pair in id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub factors: Vec<Factor>,
    pub tgt: Vec<TokenId>,
}
