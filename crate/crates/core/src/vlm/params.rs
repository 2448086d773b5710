use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{domain, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameters of the toy model, listed in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `V x d`
    pub tok_emb: Tensor,
    /// `d_v x d`
    pub vis_proj: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// `d x ff`
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    /// `ff x d`
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    /// `d x V`
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// `(M + T_max) x d`, visual positions first.
    pub pos_emb: Tensor,
    /// `1 x d`
    pub mask_emb: Tensor,
}

pub const PARAM_NAMES: [&str; 14] = [
    "tok_emb", "vis_proj", "w_q", "w_k", "w_v", "w_o", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
    "head_w", "head_b", "pos_emb", "mask_emb",
];

fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 14] {
    let (d, v, ff) = (cfg.d_model, cfg.vocab_size, cfg.ff_dim);
    [
        vec![v, d],
        vec![cfg.visual_dim, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, ff],
        vec![ff],
        vec![ff, d],
        vec![d],
        vec![d, v],
        vec![v],
        vec![cfg.visual_tokens + cfg.max_text_len, d],
        vec![1, d],
    ]
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let t = shapes(&config).map(|s| Tensor::zeros(&s));
        Self::from_tensors(config, t.into())
    }

    /// Gaussian initialisation: embeddings with std 0.5, weight matrices with
    /// std `1/sqrt(fan_in)`, biases at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = shapes(&config);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in PARAM_NAMES.iter().zip(shapes.iter()) {
            let std = match *name {
                "ff_b1" | "ff_b2" | "head_b" => 0.0,
                "tok_emb" | "pos_emb" | "mask_emb" => 0.5,
                _ => 1.0 / (shape[0] as f64).sqrt(),
            };
            let mut t = Tensor::zeros(shape);
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                t.data_mut()
                    .iter_mut()
                    .for_each(|x| *x = normal.sample(&mut rng));
            }
            tensors.push(t);
        }
        Self::from_tensors(config, tensors)
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = shapes(&config);
        if tensors.len() != expected.len() {
            return Err(domain(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(expected.iter()).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(domain(format!(
                    "parameter {name} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            config,
            tok_emb: next(),
            vis_proj: next(),
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            ff_w1: next(),
            ff_b1: next(),
            ff_w2: next(),
            ff_b2: next(),
            head_w: next(),
            head_b: next(),
            pos_emb: next(),
            mask_emb: next(),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 14] {
        [
            &self.tok_emb,
            &self.vis_proj,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
            &self.head_w,
            &self.head_b,
            &self.pos_emb,
            &self.mask_emb,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 14] {
        [
            &mut self.tok_emb,
            &mut self.vis_proj,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.pos_emb,
            &mut self.mask_emb,
        ]
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors().iter().zip(other.tensors()).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            vocab_size: self.config.vocab_size,
            config: self.config.clone(),
            tensors: PARAM_NAMES
                .iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(domain(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        if ckpt.vocab_size != ckpt.config.vocab_size {
            return Err(domain("checkpoint header vocab_size disagrees with config"));
        }
        ckpt.config.validate()?;
        let mut tensors = Vec::with_capacity(ckpt.tensors.len());
        for (nt, name) in ckpt.tensors.into_iter().zip(PARAM_NAMES) {
            if nt.name != name {
                return Err(domain(format!(
                    "checkpoint tensor {:?} where {name:?} was expected",
                    nt.name
                )));
            }
            tensors.push(Tensor::new(nt.shape, nt.data)?);
        }
        let params = Self::from_tensors(ckpt.config, tensors)?;
        if !params.is_finite() {
            return Err(domain("checkpoint contains non-finite values"));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk checkpoint: header fields plus named tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab_size: usize,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Frozen reference policy. Only shared access is exposed.
#[derive(Debug, Clone)]
pub struct ReferenceModel(ModelParams);

impl ReferenceModel {
    pub fn freeze(params: ModelParams) -> Self {
        Self(params)
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    /// A trainable copy, the usual starting point for the policy.
    pub fn thaw_copy(&self) -> ModelParams {
        self.0.clone()
    }
}

impl std::ops::Deref for ReferenceModel {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_small() {
        let p = ModelParams::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(p.param_count(), ModelConfig::default().param_count());
        assert!(p.param_count() <= 50_000);
        assert!(p.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = ModelParams::init(ModelConfig::default(), 17).unwrap();
        let back = ModelParams::from_json(&p.to_json().unwrap()).unwrap();
        assert!(p.bitwise_eq(&back));
    }

    #[test]
    fn checkpoint_version_checked() {
        let p = ModelParams::init(ModelConfig::default(), 1).unwrap();
        let mut ck = p.to_checkpoint();
        ck.format_version = 99;
        assert!(ModelParams::from_checkpoint(ck).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let b = ModelParams::init(ModelConfig::default(), 3).unwrap();
        let c = ModelParams::init(ModelConfig::default(), 4).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }
}
