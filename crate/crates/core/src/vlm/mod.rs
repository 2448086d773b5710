//! Tiny vision-language model: frozen synthetic encoder, linear projector,
//! one single-head transformer block, and an output head.

mod config;
mod forward;
mod params;
mod sft;
pub mod visual;
pub mod vocab;

pub use config::ModelConfig;
pub use forward::{Decoder, ParamVars, VisualContext};
pub use params::{
    Checkpoint, ModelParams, NamedTensor, ReferenceModel, CHECKPOINT_FORMAT_VERSION, PARAM_NAMES,
};
pub use sft::{batch_gradients, sft_train, SftConfig, SftExample, SftOutcome};
pub use visual::{MaskSpec, MaskStrategy, Scene, SceneLayout, VisualInput};
pub use vocab::TokenId;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    Chosen,
    Rejected,
}

/// A validated token list (`0 <= id < V`, length `<= T_max`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub role: Role,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, role: Role, cfg: &ModelConfig) -> Result<Self> {
        if tokens.len() > cfg.max_text_len {
            return Err(domain(format!(
                "{role:?} sequence of {} tokens exceeds T_max = {}",
                tokens.len(),
                cfg.max_text_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(domain(format!("token {t} outside vocabulary")));
        }
        Ok(Self { tokens, role })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Projected (and possibly token-masked) visual tokens, `M x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens(pub Tensor);

pub fn encode_visual(
    params: &ModelParams,
    input: &VisualInput,
    mask: Option<&MaskSpec>,
) -> Result<VisualTokens> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let v = Decoder::new(&params.config, &vars).encode_visual(&mut g, input, mask)?;
    Ok(VisualTokens(g.value(v).clone()))
}

/// Teacher-forced logits, `len(text) x V`.
pub fn forward_logits(
    params: &ModelParams,
    visual: &VisualTokens,
    text: &[TokenId],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let dec = Decoder::new(&params.config, &vars);
    let vis = g.constant(visual.0.clone());
    let ctx = dec.visual_context(&mut g, vis)?;
    let logits = dec.forward_logits(&mut g, &ctx, text)?;
    Ok(g.value(logits).clone())
}

pub fn sequence_logprob(
    params: &ModelParams,
    visual: &VisualTokens,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let dec = Decoder::new(&params.config, &vars);
    let vis = g.constant(visual.0.clone());
    let ctx = dec.visual_context(&mut g, vis)?;
    let lp = dec.sequence_logprob(&mut g, &ctx, prompt, response)?;
    g.value(lp).item()
}

/// Log-probabilities of several responses to one prompt, sharing the image pass.
pub fn sequence_logprobs(
    params: &ModelParams,
    input: &VisualInput,
    prompt: &[TokenId],
    responses: &[&[TokenId]],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let dec = Decoder::new(&params.config, &vars);
    let vis = dec.encode_visual(&mut g, input, None)?;
    let ctx = dec.visual_context(&mut g, vis)?;
    responses
        .iter()
        .map(|r| {
            let lp = dec.sequence_logprob(&mut g, &ctx, prompt, r)?;
            g.value(lp).item()
        })
        .collect()
}

/// Argmax decoding (ties go to the lower token id). Stops at EOS, after
/// `max_len` tokens, or when the text reaches `T_max`. EOS is not returned.
pub fn greedy_decode(
    params: &ModelParams,
    visual: &VisualTokens,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let cfg = &params.config;
    if max_len > cfg.max_text_len {
        return Err(domain(format!(
            "max_len {max_len} exceeds T_max = {}",
            cfg.max_text_len
        )));
    }
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let dec = Decoder::new(cfg, &vars);
    let vis = g.constant(visual.0.clone());
    let ctx = dec.visual_context(&mut g, vis)?;
    let mut text = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && text.len() < cfg.max_text_len {
        let logits = dec.next_token_logits(&mut g, &ctx, &text)?;
        let lv = g.value(logits);
        let (rows, _) = lv.dims2()?;
        let last = lv.row(rows - 1);
        let mut best = 0;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        let tok = best as TokenId;
        if tok == vocab::EOS {
            break;
        }
        out.push(tok);
        text.push(tok);
    }
    Ok(out)
}
