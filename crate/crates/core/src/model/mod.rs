//! Pre-norm encoder-decoder transformer used for both teacher and student.

mod params;
mod transformer;

pub use params::ParamStore;
pub use transformer::{Forward, Ids, Mode, TransformerModel};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub dropout_p: f64,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Small config with the usual defaults (no dropout, tied embeddings).
    pub fn tiny(vocab_size: usize, d_model: usize, n_heads: usize, layers: usize, d_ffn: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            n_enc_layers: layers,
            n_dec_layers: layers,
            d_ffn,
            dropout_p: 0.0,
            max_len: 64,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    fn attention_size(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    fn ffn_size(&self) -> usize {
        2 * self.d_model * self.d_ffn + self.d_ffn + self.d_model
    }

    fn norm_size(&self) -> usize {
        2 * self.d_model
    }

    /// Parameters in one encoder layer.
    pub fn encoder_layer_size(&self) -> usize {
        self.attention_size() + self.ffn_size() + 2 * self.norm_size()
    }

    /// Parameters in one decoder layer.
    pub fn decoder_layer_size(&self) -> usize {
        2 * self.attention_size() + self.ffn_size() + 3 * self.norm_size()
    }
}

/// Exact trainable-parameter count implied by `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let embed = config.vocab_size * config.d_model;
    let embeddings = if config.tie_embeddings { 2 * embed } else { 3 * embed };
    embeddings
        + config.n_enc_layers * config.encoder_layer_size()
        + config.n_dec_layers * config.decoder_layer_size()
        + 2 * config.norm_size()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig::tiny(10, 8, 2, 1, 16)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = base();
        c.d_model = 7;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn rejects_zero_counts_and_bad_dropout() {
        let mut c = base();
        c.n_dec_layers = 0;
        assert!(c.validate().unwrap_err().to_string().contains("n_dec_layers"));
        let mut c = base();
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn layer_additivity() {
        let c = base();
        let mut doubled = c.clone();
        doubled.n_enc_layers *= 2;
        assert_eq!(param_count(&doubled) - param_count(&c), c.encoder_layer_size());
    }

    #[test]
    fn tying_saves_one_embedding_matrix() {
        let mut c = base();
        let tied = param_count(&c);
        c.tie_embeddings = false;
        assert_eq!(param_count(&c) - tied, c.vocab_size * c.d_model);
    }
}
