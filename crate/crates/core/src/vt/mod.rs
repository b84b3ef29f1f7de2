//! Toy vision transformer for masked-autoencoder pre-training: patching,
//! random masking, a pre-norm encoder with TBM hooks, and a light decoder
//! that predicts the pixels of masked patches.

mod model;
mod patch;

pub use model::{gather_tokens, linear, mae_loss, sincos_table, Block, Linear, Norm, TbmNoise, Vit};
pub use patch::{masked_count, patchify, sample_mask, unpatchify, MaskPlan};

use serde::{Deserialize, Serialize};

use crate::tbm::AlphaGrad;

/// Where inside an encoder block the TBM is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TbmPlacement {
    /// After the attention and MLP residual adds.
    #[default]
    AfterBlock,
    /// Between the attention residual add and the MLP.
    AfterAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Block indices followed by a TBM.
    pub tbm_layers: Vec<usize>,
    /// Denoiser hidden width; `None` means `dim / 2`.
    pub tbm_hidden: Option<usize>,
    pub tbm_placement: TbmPlacement,
    #[serde(skip)]
    pub alpha_grad: AlphaGrad,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch: 8,
            dim: 32,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            tbm_layers: vec![0, 1, 2],
            tbm_hidden: None,
            tbm_placement: TbmPlacement::AfterBlock,
            alpha_grad: AlphaGrad::Full,
            decoder_depth: 1,
            decoder_dim: 32,
            decoder_heads: 2,
        }
    }
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn tbm_hidden(&self) -> usize {
        self.tbm_hidden.unwrap_or(self.dim / 2)
    }

    /// `{bottom, middle, top}` block indices for this depth.
    pub fn three_levels(depth: usize) -> Vec<usize> {
        vec![0, depth / 2, depth.saturating_sub(1)]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(format!("patch {} must divide image size {}", self.patch, self.image_size));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(format!(
                "decoder dim {} must be divisible by decoder heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err("depth, channels and mlp_ratio must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &self.tbm_layers {
            if l >= self.depth {
                return Err(format!("tbm layer {l} out of range for depth {}", self.depth));
            }
            if !seen.insert(l) {
                return Err(format!("tbm layer {l} listed twice"));
            }
        }
        if self.tbm_hidden == Some(0) || (self.tbm_hidden.is_none() && !self.tbm_layers.is_empty() && self.dim < 2) {
            return Err("tbm hidden width must be positive".into());
        }
        Ok(())
    }
}
