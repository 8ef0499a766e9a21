use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy set-prediction detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// K, the fixed number of predictions per image.
    pub queries: usize,
    /// C, real classes; logits carry one extra "no object" column.
    pub num_classes: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 8,
            num_classes: 8,
            ffn_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail("embed_dim must be divisible by heads");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail("image_size must be divisible by patch_size");
        }
        if self.queries == 0 || self.num_classes == 0 || self.ffn_dim == 0 {
            return fail("queries, num_classes and ffn_dim must be positive");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let n = self.image_size / self.patch_size;
        n * n
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Closed-form parameter count of the detector built by `init_model`.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let f = self.ffn_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let attn = 4 * linear(d, d);
        let ffn = linear(d, f) + linear(f, d);
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        linear(self.patch_dim(), d)
            + self.encoder_layers * enc
            + ln
            + self.queries * d
            + self.decoder_layers * dec
            + ln
            + linear(d, self.num_classes + 1)
            + linear(d, d)
            + linear(d, 4)
    }
}
