use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerNorm;

/// How often the per-layer modality-dropout variates are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutGranularity {
    /// One draw per layer per optimisation step, shared by the whole batch.
    #[default]
    Step,
    /// One draw per layer per training example.
    Example,
}

/// Architecture hyperparameters. The encoder fields mirror the
/// multimodal encoder's knobs; `p_net` is the modality-dropout rate used
/// during training (inference always fuses by averaging).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Layers in both encoder and decoder.
    pub n_layers: usize,
    /// Width of the raw image feature vectors.
    pub d_img: usize,
    /// Rows of the trainable initial history matrix.
    pub h_len: usize,
    pub max_len: usize,
    pub max_images: usize,
    /// Context turns kept before the query.
    pub context_size: usize,
    pub p_net: f64,
    pub dropout_granularity: DropoutGranularity,
    /// Reuse the embedding table as the output projection.
    pub tie_output: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small defaults that train on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 200,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            d_img: 64,
            h_len: 16,
            max_len: 16,
            max_images: 4,
            context_size: 2,
            p_net: 0.4,
            dropout_granularity: DropoutGranularity::Step,
            tie_output: true,
            ln_eps: LayerNorm::DEFAULT_EPS,
        }
    }

    /// Full-size settings: 512-wide, 8 heads, sentences up to 32 tokens,
    /// 512-d image features.
    pub fn paper_scale() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            d_img: 512,
            h_len: 32,
            max_len: 32,
            ..Self::desk()
        }
    }

    /// Width-8 model for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 60,
            d_model: 8,
            n_heads: 2,
            d_ff: 32,
            n_layers: 2,
            d_img: 8,
            h_len: 4,
            max_len: 12,
            p_net: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("d_img", self.d_img),
            ("h_len", self.h_len),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.p_net) {
            return Err(Error::config(format!("p_net {} outside [0, 1]", self.p_net)));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::config("ln_eps must be non-negative"));
        }
        if self.vocab_size <= crate::data::RESERVED.len() {
            return Err(Error::config("vocabulary smaller than the reserved tokens"));
        }
        Ok(())
    }
}
