//! The two-stream cross-modal attention network and its visual-only twin.
//!
//! Both streams project their inputs to `d_model`, pass them through one shared
//! post-norm encoder block (queries from the stream, keys/values from the other
//! modality), and score each snippet with a per-modality affine head. The fused
//! logit is the sum of the unimodal logits; the video score is the mean of the
//! top-K snippet sigmoids. There is no positional encoding, so the network is
//! equivariant to snippet permutations.

mod layers;
mod model;
mod params;

use serde::{Deserialize, Serialize};

pub use layers::{gelu, gelu_grad, multi_head_attention, softmax_rows, LAYER_NORM_EPS};
pub use model::{
    backward_av, backward_visual, bottom_k_indices, cross_attention, forward_av, forward_visual,
    kmax_pool, kmax_pool_backward, sigmoid, top_k_indices, AvCache, LogitsBundle, TwinCache,
    TwinOutput,
};
pub use params::{
    count_parameters, init_params, init_twin, parameter_counts, Attention, EncoderBlock,
    FeedForward, LayerNorm, Linear, ModelParams, Parameters, VisualTwinParams,
};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub d_audio: usize,
    pub d_visual: usize,
}

impl Default for NetworkConfig {
    /// VGGish (128) audio and I3D (1024) visual inputs.
    fn default() -> Self {
        Self::new(128, 1024)
    }
}

impl NetworkConfig {
    pub fn new(d_audio: usize, d_visual: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            ffn_dim: 512,
            dropout: 0.1,
            d_audio,
            d_visual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_dim == 0 || self.d_audio == 0 || self.d_visual == 0 {
            return Err(Error::Config(
                "ffn_dim, d_audio and d_visual must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
