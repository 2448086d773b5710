//! Decoder forward pass on the tape.
//!
//! Layout of the single transformer block's input: the `M` visual tokens
//! (bidirectional among themselves, blind to text) followed by text tokens
//! (causal, seeing every visual token). The logit row predicting text token
//! `t` is read from the hidden state one slot earlier, so row 0 comes from
//! the last visual slot and conditions on the image alone.

use super::visual::{encode_features, token_mask_rows, MaskSpec, VisualInput};
use super::vocab::{TokenId, BOS};
use super::{ModelConfig, ModelParams};
use crate::error::{domain, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Model parameters registered on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub vis_proj: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub pos_emb: Var,
    pub mask_emb: Var,
}

impl ParamVars {
    fn register(g: &mut Graph, p: &ModelParams, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            tok_emb: reg(&p.tok_emb),
            vis_proj: reg(&p.vis_proj),
            w_q: reg(&p.w_q),
            w_k: reg(&p.w_k),
            w_v: reg(&p.w_v),
            w_o: reg(&p.w_o),
            ff_w1: reg(&p.ff_w1),
            ff_b1: reg(&p.ff_b1),
            ff_w2: reg(&p.ff_w2),
            ff_b2: reg(&p.ff_b2),
            head_w: reg(&p.head_w),
            head_b: reg(&p.head_b),
            pos_emb: reg(&p.pos_emb),
            mask_emb: reg(&p.mask_emb),
        }
    }

    pub fn trainable(g: &mut Graph, p: &ModelParams) -> Self {
        Self::register(g, p, true)
    }

    pub fn frozen(g: &mut Graph, p: &ModelParams) -> Self {
        Self::register(g, p, false)
    }

    /// Rebuilds from vars in checkpoint order (see `ModelParams::tensors`).
    pub fn from_vars(v: &[Var]) -> Result<Self> {
        if v.len() != 14 {
            return Err(domain(format!(
                "expected 14 parameter vars, got {}",
                v.len()
            )));
        }
        Ok(Self {
            tok_emb: v[0],
            vis_proj: v[1],
            w_q: v[2],
            w_k: v[3],
            w_v: v[4],
            w_o: v[5],
            ff_w1: v[6],
            ff_b1: v[7],
            ff_w2: v[8],
            ff_b2: v[9],
            head_w: v[10],
            head_b: v[11],
            pos_emb: v[12],
            mask_emb: v[13],
        })
    }

    pub fn all(&self) -> [Var; 14] {
        [
            self.tok_emb,
            self.vis_proj,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ff_w1,
            self.ff_b1,
            self.ff_w2,
            self.ff_b2,
            self.head_w,
            self.head_b,
            self.pos_emb,
            self.mask_emb,
        ]
    }

    /// Gradients of every parameter after `backward`, in checkpoint order.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.all().iter().map(|&v| g.grad_or_zeros(v)).collect()
    }
}

/// Per-image state shared by every text sequence decoded against it.
#[derive(Debug, Clone, Copy)]
pub struct VisualContext {
    keys: Var,
    values: Var,
    /// Block output (before the feed-forward) at the last visual slot.
    last_hidden: Var,
}

/// Differentiable decoder bound to a set of registered parameters.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a ParamVars,
}

impl<'a> Decoder<'a> {
    pub fn new(cfg: &'a ModelConfig, p: &'a ParamVars) -> Self {
        Self { cfg, p }
    }

    /// Frozen encoder, trainable projection, then token-level masking.
    pub fn encode_visual(
        &self,
        g: &mut Graph,
        input: &VisualInput,
        mask: Option<&MaskSpec>,
    ) -> Result<Var> {
        let feats = g.constant(encode_features(input, self.cfg, mask)?);
        let projected = g.matmul(feats, self.p.vis_proj)?;
        let dropped = token_mask_rows(self.cfg, mask);
        if dropped.is_empty() {
            return Ok(projected);
        }
        let m = self.cfg.visual_tokens;
        let with_mask = g.concat_rows(&[projected, self.p.mask_emb])?;
        let mut idx: Vec<usize> = (0..m).collect();
        for r in dropped {
            idx[r] = m;
        }
        g.gather_rows(with_mask, &idx)
    }

    pub fn visual_context(&self, g: &mut Graph, visual: Var) -> Result<VisualContext> {
        let m = self.cfg.visual_tokens;
        let (rows, cols) = g.value(visual).dims2()?;
        if (rows, cols) != (m, self.cfg.d_model) {
            return Err(domain(format!(
                "visual tokens are {rows}x{cols}, expected {m}x{}",
                self.cfg.d_model
            )));
        }
        let pos_idx: Vec<usize> = (0..m).collect();
        let pos = g.gather_rows(self.p.pos_emb, &pos_idx)?;
        let x = g.add(visual, pos)?;
        let keys = g.matmul(x, self.p.w_k)?;
        let values = g.matmul(x, self.p.w_v)?;
        let x_last = g.gather_rows(x, &[m - 1])?;
        let q = g.matmul(x_last, self.p.w_q)?;
        let kt = g.transpose(keys)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.cfg.d_model as f64).sqrt());
        let attn = g.masked_softmax_rows(scores, vec![true; m])?;
        let mixed = g.matmul(attn, values)?;
        let out = g.matmul(mixed, self.p.w_o)?;
        let last_hidden = g.add(x_last, out)?;
        Ok(VisualContext {
            keys,
            values,
            last_hidden,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(domain(format!(
                "token {t} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for the token after each prefix of `inputs`: row `i` sees the
    /// image and `inputs[..i]`. Returns `(len(inputs) + 1) x V`.
    pub fn next_token_logits(
        &self,
        g: &mut Graph,
        ctx: &VisualContext,
        inputs: &[TokenId],
    ) -> Result<Var> {
        self.check_tokens(inputs)?;
        let m = self.cfg.visual_tokens;
        let n = inputs.len();
        if n > self.cfg.max_text_len {
            return Err(domain(format!(
                "text of {n} tokens exceeds T_max = {}",
                self.cfg.max_text_len
            )));
        }
        let hidden = if n == 0 {
            ctx.last_hidden
        } else {
            let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
            let emb = g.gather_rows(self.p.tok_emb, &idx)?;
            let pos_idx: Vec<usize> = (m..m + n).collect();
            let pos = g.gather_rows(self.p.pos_emb, &pos_idx)?;
            let x = g.add(emb, pos)?;
            let q = g.matmul(x, self.p.w_q)?;
            let k = g.matmul(x, self.p.w_k)?;
            let v = g.matmul(x, self.p.w_v)?;
            let keys = g.concat_rows(&[ctx.keys, k])?;
            let values = g.concat_rows(&[ctx.values, v])?;
            let kt = g.transpose(keys)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (self.cfg.d_model as f64).sqrt());
            let width = m + n;
            let allowed = (0..n)
                .flat_map(|i| (0..width).map(move |j| j < m || j - m <= i))
                .collect();
            let attn = g.masked_softmax_rows(scores, allowed)?;
            let mixed = g.matmul(attn, values)?;
            let out = g.matmul(mixed, self.p.w_o)?;
            let h = g.add(x, out)?;
            g.concat_rows(&[ctx.last_hidden, h])?
        };
        let ff = g.matmul(hidden, self.p.ff_w1)?;
        let ff = g.add_row(ff, self.p.ff_b1)?;
        let ff = g.gelu(ff);
        let ff = g.matmul(ff, self.p.ff_w2)?;
        let ff = g.add_row(ff, self.p.ff_b2)?;
        let h2 = g.add(hidden, ff)?;
        let logits = g.matmul(h2, self.p.head_w)?;
        g.add_row(logits, self.p.head_b)
    }

    /// Teacher-forced logits, `len(text) x V`; row `t` predicts `text[t]`.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        ctx: &VisualContext,
        text: &[TokenId],
    ) -> Result<Var> {
        match text.first() {
            None => return Err(domain("forward_logits on empty text")),
            Some(&t) if t != BOS => {
                return Err(domain(format!("text must begin with BOS, found {t}")))
            }
            _ => {}
        }
        if text.len() > self.cfg.max_text_len {
            return Err(domain(format!(
                "text of {} tokens exceeds T_max = {}",
                text.len(),
                self.cfg.max_text_len
            )));
        }
        self.check_tokens(text)?;
        self.next_token_logits(g, ctx, &text[..text.len() - 1])
    }

    /// `sum_t log p(response_t | image, prompt, response_<t)`.
    pub fn sequence_logprob(
        &self,
        g: &mut Graph,
        ctx: &VisualContext,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(domain("sequence_logprob of an empty response"));
        }
        let text: Vec<TokenId> = prompt.iter().chain(response).copied().collect();
        let logits = self.forward_logits(g, ctx, &text)?;
        let logp = g.log_softmax_rows(logits)?;
        let coords: Vec<(usize, usize)> = (prompt.len()..text.len())
            .map(|t| (t, text[t] as usize))
            .collect();
        let picked = g.pick(logp, &coords)?;
        Ok(g.sum(picked))
    }
}
