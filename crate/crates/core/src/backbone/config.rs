use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the encoder/decoder pair and the prior heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub n_heads_enc: usize,
    pub n_heads_dec: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    /// Output width `K` of the distillation heads.
    pub distill_dim: usize,
    /// Width of the frozen image/text embedding space.
    pub sem_dim: usize,
    /// Softmax temperature of the text-similarity distributions.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// ViT-B/16 encoder with an 8-block, 512-wide decoder.
    pub fn base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            d_enc: 768,
            d_dec: 512,
            enc_depth: 12,
            dec_depth: 8,
            n_heads_enc: 12,
            n_heads_dec: 16,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            distill_dim: 256,
            sem_dim: 512,
            temperature: 1.0,
        }
    }

    /// Small enough to pre-train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_enc: 48,
            d_dec: 32,
            enc_depth: 3,
            dec_depth: 2,
            n_heads_enc: 4,
            n_heads_dec: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            distill_dim: 64,
            sem_dim: 32,
            temperature: 1.0,
        }
    }

    /// The configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_enc: 16,
            d_dec: 8,
            enc_depth: 2,
            dec_depth: 1,
            n_heads_enc: 2,
            n_heads_dec: 2,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            distill_dim: 8,
            sem_dim: 8,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.d_enc == 0 || self.d_dec == 0 {
            return fail("d_enc and d_dec must be positive".into());
        }
        if self.n_heads_enc == 0 || !self.d_enc.is_multiple_of(self.n_heads_enc) {
            return fail(format!("d_enc {} not divisible by n_heads_enc {}", self.d_enc, self.n_heads_enc));
        }
        if self.n_heads_dec == 0 || !self.d_dec.is_multiple_of(self.n_heads_dec) {
            return fail(format!("d_dec {} not divisible by n_heads_dec {}", self.d_dec, self.n_heads_dec));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} outside [0,1)", self.mask_ratio));
        }
        if self.distill_dim < 2 {
            return fail(format!("distill_dim {} must be at least 2", self.distill_dim));
        }
        if self.sem_dim < 2 {
            return fail(format!("sem_dim {} must be at least 2", self.sem_dim));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}
