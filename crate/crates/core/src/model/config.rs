use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden_dim: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The oracle-sized model: L=2, H=2, d=8, V=32.
    ///
    /// Too small a vocabulary for the byte tokenizer; drive it with raw ids.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 32,
            model_dim: 8,
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            mlp_hidden_dim: 32,
            max_seq_len: 64,
        }
    }

    /// Smallest configuration that can read and write text with the byte tokenizer.
    pub fn tiny_text() -> Self {
        Self {
            vocab_size: 260,
            model_dim: 16,
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            mlp_hidden_dim: 64,
            max_seq_len: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.num_heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "model_dim ({}) must equal num_heads ({}) x head_dim ({})",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        Ok(())
    }
}
