use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-position encoder/decoder outputs are reduced to one vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Model width; pooled representations have this length.
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub max_source_len: usize,
    /// Decoder steps, including the final EOS prediction.
    pub max_target_len: usize,
    pub seed: u64,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embedding_dim: 64,
            hidden_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            max_source_len: 128,
            max_target_len: 48,
            seed: 0,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    /// Width of the position-wise feed-forward block.
    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.attention_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_heads", self.attention_heads),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return Err(Error::Config(
                "vocab_size must exceed the reserved symbols".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "attention_heads ({}) must divide hidden_dim ({})",
                self.attention_heads, self.hidden_dim
            )));
        }
        if self.max_source_len < 3 {
            return Err(Error::Config(
                "max_source_len must fit BOS, one token and EOS".into(),
            ));
        }
        Ok(())
    }
}
