//! Synthetic scenes, their rendered feature grids, the four masking
//! strategies, and the frozen (parameter-free) visual encoder.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{domain, Result};
use crate::tensor::{kernels, Tensor};

/// Latent ground truth of one synthetic image: one value per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scene {
    pub attributes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub attributes: usize,
    pub values: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            attributes: 4,
            values: 8,
        }
    }
}

impl Scene {
    pub fn new(attributes: Vec<u8>, layout: SceneLayout) -> Result<Self> {
        let s = Self { attributes };
        s.validate(layout)?;
        Ok(s)
    }

    pub fn validate(&self, layout: SceneLayout) -> Result<()> {
        if self.attributes.len() != layout.attributes {
            return Err(domain(format!(
                "scene has {} attributes, layout expects {}",
                self.attributes.len(),
                layout.attributes
            )));
        }
        if let Some(v) = self
            .attributes
            .iter()
            .find(|&&v| v as usize >= layout.values)
        {
            return Err(domain(format!(
                "attribute value {v} outside [0, {})",
                layout.values
            )));
        }
        Ok(())
    }
}

/// The `M x d_v` feature grid of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub features: Tensor,
}

impl VisualInput {
    /// Renders a scene. Rows are split into one contiguous block per
    /// attribute; each row of block `a` carries a one-hot code of the value
    /// of attribute `a` plus Gaussian noise drawn from `seed`.
    pub fn render(
        scene: &Scene,
        layout: SceneLayout,
        cfg: &ModelConfig,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        scene.validate(layout)?;
        if layout.values > cfg.visual_dim {
            return Err(domain(format!(
                "{} attribute values do not fit a {}-wide feature row",
                layout.values, cfg.visual_dim
            )));
        }
        if layout.attributes > cfg.visual_tokens {
            return Err(domain("more attributes than visual rows"));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(domain(format!("invalid noise_std {noise_std}")));
        }
        let (m, dv) = (cfg.visual_tokens, cfg.visual_dim);
        let mut data = vec![0.0; m * dv];
        for r in 0..m {
            let attr = r * layout.attributes / m;
            data[r * dv + scene.attributes[attr] as usize] = 1.0;
        }
        if noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, noise_std).expect("finite std");
            data.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        Ok(Self {
            features: Tensor::matrix(m, dv, data)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Zero individual raw feature entries.
    Pixel,
    /// Zero whole raw feature rows.
    Patch,
    /// Hide rows as keys inside the encoder attention.
    Latent,
    /// Replace projected visual tokens with the learned MASK embedding.
    Token,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [Self::Pixel, Self::Patch, Self::Latent, Self::Token];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pixel => "pixel",
            Self::Patch => "patch",
            Self::Latent => "latent",
            Self::Token => "token",
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| domain(format!("unknown mask strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy, ratio: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            strategy,
            ratio,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(domain(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// `floor(ratio * population + 0.5)`.
    pub fn masked_count(&self, population: usize) -> usize {
        ((self.ratio * population as f64 + 0.5).floor() as usize).min(population)
    }

    /// Indices (sorted) chosen uniformly without replacement out of `population`.
    pub fn select(&self, population: usize) -> Vec<usize> {
        let count = self.masked_count(population);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = sample(&mut rng, population, count).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Output of the frozen encoder: pixel/patch masks applied to the raw grid,
/// then one residual self-attention pass with identity projections and a
/// same-region bias, with the latent mask hiding rows as keys.
pub fn encode_features(
    input: &VisualInput,
    cfg: &ModelConfig,
    mask: Option<&MaskSpec>,
) -> Result<Tensor> {
    let (m, dv) = input.features.dims2()?;
    if (m, dv) != (cfg.visual_tokens, cfg.visual_dim) {
        return Err(domain(format!(
            "visual input is {m}x{dv}, model expects {}x{}",
            cfg.visual_tokens, cfg.visual_dim
        )));
    }
    if let Some(spec) = mask {
        spec.validate()?;
    }
    let mut f = input.features.data().to_vec();
    let mut key_visible = vec![true; m];
    match mask.map(|s| (s.strategy, s)) {
        Some((MaskStrategy::Pixel, s)) => {
            for i in s.select(m * dv) {
                f[i] = 0.0;
            }
        }
        Some((MaskStrategy::Patch, s)) => {
            for r in s.select(m) {
                f[r * dv..(r + 1) * dv].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Some((MaskStrategy::Latent, s)) => {
            for r in s.select(m) {
                key_visible[r] = false;
            }
        }
        Some((MaskStrategy::Token, _)) | None => {}
    }

    let scale = 1.0 / (dv as f64).sqrt();
    let mut out = f.clone();
    let mut scores = vec![0.0; m];
    for i in 0..m {
        let fi = &f[i * dv..(i + 1) * dv];
        let mut any = false;
        for j in 0..m {
            if !key_visible[j] {
                scores[j] = f64::NEG_INFINITY;
                continue;
            }
            any = true;
            let fj = &f[j * dv..(j + 1) * dv];
            let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
            let local = if cfg.region_of(i) == cfg.region_of(j) {
                cfg.encoder_locality
            } else {
                0.0
            };
            scores[j] = dot * scale + local;
        }
        if !any {
            continue;
        }
        let p = kernels::softmax(&scores)?;
        let row = &mut out[i * dv..(i + 1) * dv];
        for (j, &w) in p.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &x) in row.iter_mut().zip(&f[j * dv..(j + 1) * dv]) {
                *o += w * x;
            }
        }
    }
    Tensor::matrix(m, dv, out)
}

/// Rows replaced by the MASK embedding under token-level masking.
pub fn token_mask_rows(cfg: &ModelConfig, mask: Option<&MaskSpec>) -> Vec<usize> {
    match mask {
        Some(s) if s.strategy == MaskStrategy::Token => s.select(cfg.visual_tokens),
        _ => Vec::new(),
    }
}
