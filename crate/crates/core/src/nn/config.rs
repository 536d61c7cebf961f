use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Shapes of every parameter follow from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128.
    pub fn desk(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size,
            max_seq_len,
            seed,
        }
    }

    /// 8 layers, 8 heads, width 512.
    pub fn paper(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 8,
            d_model: 512,
            vocab_size,
            max_seq_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(Error::input(format!("model dims must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::input(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count: token and position embeddings, per-layer
    /// `12 d^2 + 13 d`, final norm `2 d`, untied head `d * V`.
    pub fn num_params(&self) -> usize {
        let (d, v, s, l) = (self.d_model, self.vocab_size, self.max_seq_len, self.n_layers);
        v * d + s * d + l * (12 * d * d + 13 * d) + 2 * d + d * v
    }
}
