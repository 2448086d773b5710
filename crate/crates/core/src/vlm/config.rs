use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Dimensions of the toy vision-language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Number of visual feature rows (`M`).
    pub visual_tokens: usize,
    /// Width of one raw visual feature row (`d_v`).
    pub visual_dim: usize,
    pub ff_dim: usize,
    /// Longest text sequence (prompt + response), `T_max`.
    pub max_text_len: usize,
    /// Contiguous row groups the frozen encoder treats as spatial neighbours.
    pub visual_regions: usize,
    /// Additive attention bias between rows of the same region in the encoder.
    pub encoder_locality: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            visual_tokens: 16,
            visual_dim: 8,
            ff_dim: 64,
            max_text_len: 24,
            visual_regions: 4,
            encoder_locality: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("visual_tokens", self.visual_tokens),
            ("visual_dim", self.visual_dim),
            ("ff_dim", self.ff_dim),
            ("max_text_len", self.max_text_len),
            ("visual_regions", self.visual_regions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(domain(format!("model dimension {name} must be positive")));
        }
        if self.visual_regions > self.visual_tokens {
            return Err(domain("more visual regions than visual tokens"));
        }
        if !self.encoder_locality.is_finite() {
            return Err(domain("encoder_locality must be finite"));
        }
        Ok(())
    }

    /// Region a visual row belongs to (contiguous blocks).
    pub fn region_of(&self, row: usize) -> usize {
        row * self.visual_regions / self.visual_tokens
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        v * d                                   // token embeddings
            + self.visual_dim * d               // projection
            + 4 * d * d                         // q, k, v, o
            + d * self.ff_dim + self.ff_dim     // ff in
            + self.ff_dim * d + d               // ff out
            + d * v + v                         // head
            + (self.visual_tokens + self.max_text_len) * d // positions
            + d // mask embedding
    }
}
