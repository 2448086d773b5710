//! Multi-level preference losses: chosen-versus-rejected (explicit) and
//! rejected-versus-rejected by rank (implicit), plus the single-pair
//! baseline.

mod train;

pub use train::{
    margin_report, median, train, EpochStats, MarginReport, RecordMargins, TrainConfig,
    TrainOutcome, TrainingReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rerank::RankedCandidate;
use crate::tensor::{kernels, Graph, Tensor, Var};
use crate::vlm::{
    sequence_logprobs, Decoder, ModelConfig, ModelParams, ParamVars, ReferenceModel, TokenId,
    VisualInput,
};

/// A chosen response and its ranked dispreferred alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub id: u64,
    pub visual: VisualInput,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    /// Rank-ascending: `rejected[0]` is the best of the dispreferred.
    pub rejected: Vec<RankedCandidate>,
}

impl PreferenceRecord {
    pub fn validate(&self, cfg: &ModelConfig, min_rejected: usize) -> Result<()> {
        if self.rejected.len() < min_rejected {
            return Err(domain(format!(
                "record {} has {} rejected responses, needs {min_rejected}",
                self.id,
                self.rejected.len()
            )));
        }
        let too_long = |s: &[TokenId]| self.prompt.len() + s.len() > cfg.max_text_len;
        if self.chosen.is_empty() || too_long(&self.chosen) {
            return Err(domain(format!("record {}: bad chosen length", self.id)));
        }
        for (i, r) in self.rejected.iter().enumerate() {
            if r.tokens.is_empty() || too_long(&r.tokens) {
                return Err(domain(format!("record {}: bad rejected length", self.id)));
            }
            if r.rank != i + 1 {
                return Err(domain(format!(
                    "record {}: rejected ranks are not 1..k in order",
                    self.id
                )));
            }
            if self.rejected[..i].iter().any(|o| o.tokens == r.tokens) {
                return Err(domain(format!(
                    "record {}: duplicate rejected response",
                    self.id
                )));
            }
        }
        let all = std::iter::once(&self.chosen)
            .chain(self.rejected.iter().map(|r| &r.tokens))
            .chain(std::iter::once(&self.prompt));
        for s in all {
            if let Some(t) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(domain(format!(
                    "record {}: token {t} outside vocabulary",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Hscr,
    ExplicitOnly,
    ImplicitOnly,
    Dpo,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        Self::Dpo,
        Self::ExplicitOnly,
        Self::ImplicitOnly,
        Self::Hscr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hscr => "hscr",
            Self::ExplicitOnly => "explicit_only",
            Self::ImplicitOnly => "implicit_only",
            Self::Dpo => "dpo",
        }
    }

    pub fn min_rejected(self) -> usize {
        match self {
            Self::Hscr | Self::ImplicitOnly => 2,
            Self::ExplicitOnly | Self::Dpo => 1,
        }
    }

    fn uses_explicit(self) -> bool {
        !matches!(self, Self::ImplicitOnly)
    }

    fn uses_implicit(self) -> bool {
        matches!(self, Self::Hscr | Self::ImplicitOnly)
    }

    /// How many ranked rejected responses enter the loss.
    fn rejected_used(self, available: usize) -> usize {
        match self {
            Self::Dpo => available.min(1),
            _ => available,
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| domain(format!("unknown loss mode {s:?}")))
    }
}

/// Loss value with its explicit and implicit parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub explicit: f64,
    pub implicit: f64,
    pub explicit_pairs: usize,
    pub implicit_pairs: usize,
}

impl LossBreakdown {
    pub fn explicit_per_pair(&self) -> f64 {
        if self.explicit_pairs == 0 {
            0.0
        } else {
            self.explicit / self.explicit_pairs as f64
        }
    }

    pub fn implicit_per_pair(&self) -> f64 {
        if self.implicit_pairs == 0 {
            0.0
        } else {
            self.implicit / self.implicit_pairs as f64
        }
    }
}

/// `log pi_theta(y) - log pi_ref(y)` for the chosen and each ranked rejected
/// response.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatios {
    pub chosen: f64,
    pub rejected: Vec<f64>,
}

/// `-log sigmoid(a)`.
pub fn pair_term(a: f64) -> f64 {
    -kernels::log_sigmoid(a)
}

/// Scalar losses from precomputed log-ratios.
pub fn losses_from_ratios(r: &LogRatios, gamma: f64, mode: LossMode) -> Result<LossBreakdown> {
    let k = mode.rejected_used(r.rejected.len());
    if k < mode.min_rejected() {
        return Err(domain(format!(
            "{mode} needs {} rejected responses, got {}",
            mode.min_rejected(),
            r.rejected.len()
        )));
    }
    let rej = &r.rejected[..k];
    let mut out = LossBreakdown::default();
    if mode.uses_explicit() {
        for &l in rej {
            out.explicit += pair_term(gamma * r.chosen - gamma * l);
            out.explicit_pairs += 1;
        }
    }
    if mode.uses_implicit() {
        for j in 0..k {
            for m in j + 1..k {
                out.implicit += pair_term(gamma * rej[j] - gamma * rej[m]);
                out.implicit_pairs += 1;
            }
        }
    }
    out.total = out.explicit + out.implicit;
    Ok(out)
}

/// Reference log-probabilities for one record, fixed for a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefLogprobs {
    pub chosen: f64,
    pub rejected: Vec<f64>,
}

impl RefLogprobs {
    pub fn compute(reference: &ModelParams, rec: &PreferenceRecord) -> Result<Self> {
        let (chosen, rejected) = logprobs(reference, rec)?;
        Ok(Self { chosen, rejected })
    }
}

fn logprobs(params: &ModelParams, rec: &PreferenceRecord) -> Result<(f64, Vec<f64>)> {
    let mut responses: Vec<&[TokenId]> = vec![&rec.chosen];
    responses.extend(rec.rejected.iter().map(|r| r.tokens.as_slice()));
    let lp = sequence_logprobs(params, &rec.visual, &rec.prompt, &responses)?;
    Ok((lp[0], lp[1..].to_vec()))
}

/// The configured loss of one record on the tape. Reference terms enter as
/// constants, so gradients reach the policy only.
pub fn record_loss_graph(
    g: &mut Graph,
    dec: &Decoder<'_>,
    rec: &PreferenceRecord,
    refs: &RefLogprobs,
    gamma: f64,
    mode: LossMode,
) -> Result<(Var, LossBreakdown)> {
    let k = mode.rejected_used(rec.rejected.len());
    if k < mode.min_rejected() {
        return Err(domain(format!(
            "record {}: {mode} needs {} rejected responses, got {}",
            rec.id,
            mode.min_rejected(),
            rec.rejected.len()
        )));
    }
    if refs.rejected.len() < k {
        return Err(domain("reference log-probs do not cover the record"));
    }
    let vis = dec.encode_visual(g, &rec.visual, None)?;
    let ctx = dec.visual_context(g, vis)?;
    let ratio = |g: &mut Graph, y: &[TokenId], r: f64| -> Result<Var> {
        let lp = dec.sequence_logprob(g, &ctx, &rec.prompt, y)?;
        let c = g.constant(Tensor::scalar(r));
        g.sub(lp, c)
    };
    let chosen = if mode.uses_explicit() {
        Some(ratio(g, &rec.chosen, refs.chosen)?)
    } else {
        None
    };
    let rejected: Vec<Var> = (0..k)
        .map(|i| ratio(g, &rec.rejected[i].tokens, refs.rejected[i]))
        .collect::<Result<_>>()?;

    let neg_log_sig = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = g.sub(a, b)?;
        let s = g.scale(d, gamma);
        let ls = g.log_sigmoid(s);
        Ok(g.scale(ls, -1.0))
    };
    let mut terms = Vec::new();
    let mut out = LossBreakdown::default();
    if let Some(w) = chosen {
        let mut e = Vec::with_capacity(k);
        for &l in &rejected {
            e.push(neg_log_sig(g, w, l)?);
        }
        let sum = g.add_all(&e)?;
        out.explicit = g.value(sum).item()?;
        out.explicit_pairs = e.len();
        terms.push(sum);
    }
    if mode.uses_implicit() {
        let mut im = Vec::new();
        for j in 0..k {
            for m in j + 1..k {
                im.push(neg_log_sig(g, rejected[j], rejected[m])?);
            }
        }
        let sum = g.add_all(&im)?;
        out.implicit = g.value(sum).item()?;
        out.implicit_pairs = im.len();
        terms.push(sum);
    }
    let total = g.add_all(&terms)?;
    out.total = g.value(total).item()?;
    Ok((total, out))
}

/// Loss of one record and its gradient with respect to every policy
/// parameter (checkpoint order).
pub fn loss_gradients(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
    gamma: f64,
    mode: LossMode,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let refs = RefLogprobs::compute(reference.params(), rec)?;
    let mut g = Graph::new();
    let vars = ParamVars::trainable(&mut g, policy);
    let dec = Decoder::new(&policy.config, &vars);
    let (loss, parts) = record_loss_graph(&mut g, &dec, rec, &refs, gamma, mode)?;
    g.backward(loss)?;
    Ok((parts, vars.grads(&g)))
}

/// `gamma * (log pi_theta(y) - log pi_ref(y))`, without the partition term.
pub fn implicit_reward(
    policy: &ModelParams,
    reference: &ReferenceModel,
    visual: &VisualInput,
    prompt: &[TokenId],
    y: &[TokenId],
    gamma: f64,
) -> Result<f64> {
    let p = sequence_logprobs(policy, visual, prompt, &[y])?[0];
    let r = sequence_logprobs(reference.params(), visual, prompt, &[y])?[0];
    Ok(gamma * (p - r))
}

pub fn log_ratios(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
) -> Result<LogRatios> {
    let (pc, pr) = logprobs(policy, rec)?;
    let (rc, rr) = logprobs(reference.params(), rec)?;
    Ok(LogRatios {
        chosen: pc - rc,
        rejected: pr.iter().zip(&rr).map(|(a, b)| a - b).collect(),
    })
}

/// Loss of the configured mode for one record.
pub fn record_loss(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
    gamma: f64,
    mode: LossMode,
) -> Result<LossBreakdown> {
    losses_from_ratios(&log_ratios(policy, reference, rec)?, gamma, mode)
}

/// Single-pair loss against the best-ranked rejected response.
pub fn dpo_pair_loss(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
    gamma: f64,
) -> Result<f64> {
    Ok(record_loss(policy, reference, rec, gamma, LossMode::Dpo)?.total)
}

pub fn explicit_loss(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
    gamma: f64,
) -> Result<LossBreakdown> {
    record_loss(policy, reference, rec, gamma, LossMode::ExplicitOnly)
}

pub fn implicit_loss(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
    gamma: f64,
) -> Result<LossBreakdown> {
    record_loss(policy, reference, rec, gamma, LossMode::ImplicitOnly)
}

pub fn hscr_loss(
    policy: &ModelParams,
    reference: &ReferenceModel,
    rec: &PreferenceRecord,
    gamma: f64,
) -> Result<LossBreakdown> {
    record_loss(policy, reference, rec, gamma, LossMode::Hscr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::vocab::{BOS, EOS};
    use crate::vlm::{Scene, SceneLayout};
    use std::f64::consts::LN_2;

    fn ratios(chosen: f64, rejected: &[f64]) -> LogRatios {
        LogRatios {
            chosen,
            rejected: rejected.to_vec(),
        }
    }

    #[test]
    fn dpo_hand_value() {
        // pi_theta(y_w)=0.8, pi_ref=0.5; pi_theta(y_l)=0.1, pi_ref=0.5
        let r = ratios((0.8f64 / 0.5).ln(), &[(0.1f64 / 0.5).ln()]);
        let l = losses_from_ratios(&r, 1.0, LossMode::Dpo).unwrap();
        assert!((l.total - (9.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((l.total - 0.117783).abs() < 1e-6);
        assert_eq!(l.implicit, 0.0);
    }

    #[test]
    fn zero_ratios_give_ln2_per_pair() {
        let r = ratios(0.0, &[0.0, 0.0, 0.0]);
        let e = losses_from_ratios(&r, 0.1, LossMode::ExplicitOnly).unwrap();
        let i = losses_from_ratios(&r, 0.1, LossMode::ImplicitOnly).unwrap();
        let h = losses_from_ratios(&r, 0.1, LossMode::Hscr).unwrap();
        assert!((e.total - 3.0 * LN_2).abs() < 1e-12);
        assert!((i.total - 3.0 * LN_2).abs() < 1e-12);
        assert!((h.total - 6.0 * LN_2).abs() < 1e-12);
        assert_eq!((h.explicit_pairs, h.implicit_pairs), (3, 3));
        assert_eq!(e.implicit, 0.0);
        assert_eq!(i.explicit, 0.0);
    }

    #[test]
    fn pair_enumeration_oracle() {
        let r = ratios(0.7, &[0.3, -0.2, -1.1, 0.4]);
        let gamma = 0.5;
        let mut e = 0.0;
        for &l in &r.rejected {
            e += (1.0 + (-(gamma * (r.chosen - l))).exp()).ln();
        }
        let mut i = 0.0;
        let mut pairs = 0;
        for a in 0..4 {
            for b in 0..4 {
                if a < b {
                    i += (1.0 + (-(gamma * (r.rejected[a] - r.rejected[b]))).exp()).ln();
                    pairs += 1;
                }
            }
        }
        assert_eq!(pairs, 6);
        let h = losses_from_ratios(&r, gamma, LossMode::Hscr).unwrap();
        assert!((h.explicit - e).abs() < 1e-12);
        assert!((h.implicit - i).abs() < 1e-12);
        let k2 = ratios(9.9, &[0.3, -0.2]);
        let imp = losses_from_ratios(&k2, gamma, LossMode::ImplicitOnly).unwrap();
        let dpo = losses_from_ratios(&ratios(0.3, &[-0.2]), gamma, LossMode::Dpo).unwrap();
        assert_eq!(imp.total, dpo.total);
    }

    #[test]
    fn implicit_needs_two() {
        let r = ratios(0.0, &[0.0]);
        assert!(losses_from_ratios(&r, 0.1, LossMode::ImplicitOnly).is_err());
        assert!(losses_from_ratios(&r, 0.1, LossMode::Hscr).is_err());
        assert!(losses_from_ratios(&r, 0.1, LossMode::ExplicitOnly).is_ok());
    }

    #[test]
    fn explicit_with_one_is_dpo() {
        let r = ratios(0.4, &[-0.3]);
        let e = losses_from_ratios(&r, 0.2, LossMode::ExplicitOnly).unwrap();
        let d = losses_from_ratios(&r, 0.2, LossMode::Dpo).unwrap();
        assert_eq!(e.total, d.total);
    }

    #[test]
    fn anti_symmetry() {
        for a in [-3.0, -0.5, 0.0, 0.2, 4.0] {
            let s = pair_term(a) + pair_term(-a);
            assert!(s >= 2.0 * LN_2 - 1e-15);
            if a == 0.0 {
                assert!((s - 2.0 * LN_2).abs() < 1e-15);
            }
        }
    }

    fn record() -> (ModelParams, PreferenceRecord) {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(cfg.clone(), 5).unwrap();
        let scene = Scene::new(vec![0, 1, 2, 3], SceneLayout::default()).unwrap();
        let visual = VisualInput::render(&scene, SceneLayout::default(), &cfg, 0.2, 8).unwrap();
        let rc = |tokens: Vec<TokenId>, rank| RankedCandidate {
            tokens,
            similarity: 0.0,
            rank,
        };
        let rec = PreferenceRecord {
            id: 0,
            visual,
            prompt: vec![BOS, 6, 7, 8],
            chosen: vec![12, 12, 13, 14, 15, EOS],
            rejected: vec![
                rc(vec![13, 12, 13, 14, 15, EOS], 1),
                rc(vec![13, 14, 13, 14, 15, EOS], 2),
                rc(vec![13, 14, 15, 16, 15, EOS], 3),
            ],
        };
        (p, rec)
    }

    #[test]
    fn graph_and_scalar_paths_agree() {
        let (p, rec) = record();
        let reference = ReferenceModel::freeze(ModelParams::init(p.config.clone(), 6).unwrap());
        for mode in LossMode::ALL {
            let scalar = record_loss(&p, &reference, &rec, 0.3, mode).unwrap();
            let (graph, _) = loss_gradients(&p, &reference, &rec, 0.3, mode).unwrap();
            assert!((scalar.total - graph.total).abs() < 1e-12, "{mode}");
            assert!((scalar.explicit - graph.explicit).abs() < 1e-12);
            assert!((scalar.implicit - graph.implicit).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_equal_to_reference() {
        let (p, rec) = record();
        let reference = ReferenceModel::freeze(p.clone());
        let h = hscr_loss(&p, &reference, &rec, 0.1).unwrap();
        assert!((h.explicit - 3.0 * LN_2).abs() < 1e-9);
        assert!((h.implicit - 3.0 * LN_2).abs() < 1e-9);
        assert!((dpo_pair_loss(&p, &reference, &rec, 0.1).unwrap() - LN_2).abs() < 1e-12);
        let g = implicit_reward(&p, &reference, &rec.visual, &rec.prompt, &rec.chosen, 0.1);
        assert_eq!(g.unwrap(), 0.0);
    }

    #[test]
    fn hscr_gradient_is_sum_of_parts() {
        let (p, rec) = record();
        let reference = ReferenceModel::freeze(ModelParams::init(p.config.clone(), 11).unwrap());
        let (_, gh) = loss_gradients(&p, &reference, &rec, 0.1, LossMode::Hscr).unwrap();
        let (_, ge) = loss_gradients(&p, &reference, &rec, 0.1, LossMode::ExplicitOnly).unwrap();
        let (_, gi) = loss_gradients(&p, &reference, &rec, 0.1, LossMode::ImplicitOnly).unwrap();
        for ((h, e), i) in gh.iter().zip(&ge).zip(&gi) {
            for ((a, b), c) in h.data().iter().zip(e.data()).zip(i.data()) {
                assert!((a - (b + c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reward_scales_with_gamma() {
        let (p, rec) = record();
        let reference = ReferenceModel::freeze(ModelParams::init(p.config.clone(), 2).unwrap());
        let a =
            implicit_reward(&p, &reference, &rec.visual, &rec.prompt, &rec.chosen, 0.1).unwrap();
        let b =
            implicit_reward(&p, &reference, &rec.visual, &rec.prompt, &rec.chosen, 0.3).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn record_validation() {
        let (p, mut rec) = record();
        rec.validate(&p.config, 2).unwrap();
        assert!(rec.validate(&p.config, 4).is_err());
        rec.rejected[1].rank = 3;
        assert!(rec.validate(&p.config, 2).is_err());
        rec.rejected[1].rank = 2;
        rec.rejected[1].tokens = rec.rejected[0].tokens.clone();
        assert!(rec.validate(&p.config, 2).is_err());
    }

    #[test]
    fn loss_mode_parsing() {
        for m in LossMode::ALL {
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
        }
        assert!("nope".parse::<LossMode>().is_err());
    }
}
