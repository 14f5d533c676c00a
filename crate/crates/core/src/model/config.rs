use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    #[default]
    Sinusoidal,
}

/// Architecture of the encoder–decoder.
///
/// `bottleneck_dim == 0` disables pooling: the decoder then cross-attends to
/// every encoder position, which is how the fluency scorer is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub bottleneck_dim: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub positional: PositionalEncoding,
}

impl ModelConfig {
    /// Desk-scale defaults: 2+2 layers, 2 heads, width 64.
    pub fn desk(vocab_size: usize, bottleneck_dim: usize) -> Self {
        Self {
            vocab_size,
            max_len: 24,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 256,
            bottleneck_dim,
            dropout_rate: 0.0,
            positional: PositionalEncoding::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return fail("vocab_size must be >= 1".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be >= 2, got {}", self.max_len));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be >= 1".into());
        }
        let b = self.bottleneck_dim;
        if b != 0 && !(4..=self.d_model * self.max_len).contains(&b) {
            return fail(format!(
                "bottleneck_dim must be 0 or within [4, {}], got {b}",
                self.d_model * self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn has_bottleneck(&self) -> bool {
        self.bottleneck_dim > 0
    }
}
