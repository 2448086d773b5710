//! Self-contrastive construction of dispreferred responses.
//!
//! The reference model scores the chosen response twice under teacher
//! forcing, once with the full image and once with a masked one. Positions
//! whose ground-truth logit falls the most under masking are the sensitive
//! ones; they are overwritten with tokens the masked model favours relative
//! to the full model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::tensor::{kernels, Tensor};
use crate::vlm::vocab::{is_special, SPECIALS};
use crate::vlm::{
    encode_visual, forward_logits, MaskSpec, MaskStrategy, ReferenceModel, TokenId, VisualInput,
};

/// Per-position contrastive distributions over the chosen response.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffDistribution {
    /// `softmax((1 + beta) * full - beta * masked)` for each position.
    pub probs: Vec<Vec<f64>>,
    /// `full[y_t] - masked[y_t]`.
    pub delta: Vec<f64>,
    /// `full[v] - masked[v]` for every token.
    pub shifts: Vec<Vec<f64>>,
    /// `softmax(masked)` for each position.
    pub masked_probs: Vec<Vec<f64>>,
    pub tokens: Vec<TokenId>,
}

impl DiffDistribution {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.shifts.first().map_or(0, Vec::len)
    }
}

/// Builds the contrastive distribution from two `len(tokens) x V` logit
/// tensors whose row `t` scores `tokens[t]`.
pub fn diff_distribution(
    logits_full: &Tensor,
    logits_masked: &Tensor,
    tokens: &[TokenId],
    beta: f64,
) -> Result<DiffDistribution> {
    if logits_full.shape() != logits_masked.shape() {
        return Err(domain(format!(
            "logit shapes differ: {:?} vs {:?}",
            logits_full.shape(),
            logits_masked.shape()
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(domain(format!("beta must be finite and >= 0, got {beta}")));
    }
    let (rows, v) = logits_full.dims2()?;
    if rows != tokens.len() {
        return Err(domain(format!(
            "{rows} logit rows for {} response tokens",
            tokens.len()
        )));
    }
    let mut out = DiffDistribution {
        probs: Vec::with_capacity(rows),
        delta: Vec::with_capacity(rows),
        shifts: Vec::with_capacity(rows),
        masked_probs: Vec::with_capacity(rows),
        tokens: tokens.to_vec(),
    };
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= v {
            return Err(domain(format!("token {tok} outside vocabulary of {v}")));
        }
        let full = logits_full.row(t);
        let masked = logits_masked.row(t);
        let combined: Vec<f64> = full
            .iter()
            .zip(masked)
            .map(|(f, m)| (1.0 + beta) * f - beta * m)
            .collect();
        let shift: Vec<f64> = full.iter().zip(masked).map(|(f, m)| f - m).collect();
        out.probs.push(kernels::softmax(&combined)?);
        out.delta.push(shift[tok as usize]);
        out.shifts.push(shift);
        out.masked_probs.push(kernels::softmax(masked)?);
    }
    Ok(out)
}

/// Positions into the chosen response, ordered by descending shift.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveSet {
    pub positions: Vec<usize>,
}

/// Top `min(n, len)` positions by `delta`, ties toward the lower position.
pub fn sensitive_tokens(diff: &DiffDistribution, n: usize) -> Result<SensitiveSet> {
    if n == 0 {
        return Err(domain("n must be at least 1"));
    }
    let mut positions: Vec<usize> = (0..diff.delta.len()).collect();
    positions.sort_by(|&a, &b| diff.delta[b].total_cmp(&diff.delta[a]).then(a.cmp(&b)));
    positions.truncate(n);
    Ok(SensitiveSet { positions })
}

/// Which tokens may replace a sensitive token.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFilter {
    /// Minimum probability under the masked distribution.
    pub p_floor: f64,
    /// Tokens never offered (special tokens by default).
    pub excluded: Vec<TokenId>,
}

impl CandidateFilter {
    /// `p_floor = 1 / (4 V)`, specials excluded.
    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            p_floor: 1.0 / (4.0 * vocab_size as f64),
            excluded: SPECIALS.to_vec(),
        }
    }
}

/// Replacement tokens for `position`, most hallucination-prone first.
pub fn substitute_candidates(
    diff: &DiffDistribution,
    position: usize,
    chosen_token: TokenId,
) -> Result<Vec<TokenId>> {
    substitute_candidates_with(
        diff,
        position,
        chosen_token,
        &CandidateFilter::for_vocab(diff.vocab_size()),
    )
}

pub fn substitute_candidates_with(
    diff: &DiffDistribution,
    position: usize,
    chosen_token: TokenId,
    filter: &CandidateFilter,
) -> Result<Vec<TokenId>> {
    if position >= diff.len() {
        return Err(domain(format!(
            "position {position} outside response of length {}",
            diff.len()
        )));
    }
    let shift = &diff.shifts[position];
    let masked = &diff.masked_probs[position];
    let eligible: Vec<TokenId> = (0..shift.len() as TokenId)
        .filter(|&v| v != chosen_token && !filter.excluded.contains(&v))
        .collect();
    let mut pool: Vec<TokenId> = eligible
        .iter()
        .copied()
        .filter(|&v| masked[v as usize] >= filter.p_floor)
        .collect();
    if pool.is_empty() {
        pool = eligible;
    }
    pool.sort_by(|&a, &b| {
        shift[a as usize]
            .total_cmp(&shift[b as usize])
            .then(a.cmp(&b))
    });
    Ok(pool)
}

/// How the `k` variants spread over the sensitive positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSchedule {
    /// Variant `r` overwrites every sensitive position with its `r`-th
    /// candidate.
    Uniform,
    /// Variant `r` overwrites the `ceil(r |S| / k)` most sensitive positions
    /// with their first candidate, so later variants drift further from the
    /// chosen response.
    #[default]
    Nested,
}

/// Dispreferred variants of `chosen` given a contrastive distribution.
pub fn build_variants(
    diff: &DiffDistribution,
    chosen: &[TokenId],
    k: usize,
    n: usize,
    schedule: VariantSchedule,
    filter: &CandidateFilter,
) -> Result<(SensitiveSet, Vec<Vec<TokenId>>)> {
    if k < 2 {
        return Err(domain(format!("k must be at least 2, got {k}")));
    }
    if chosen.is_empty() {
        return Err(domain("chosen response is empty"));
    }
    if chosen != diff.tokens.as_slice() {
        return Err(domain("distribution was computed for a different response"));
    }
    let sensitive = sensitive_tokens(diff, n)?;
    let pools: Vec<Vec<TokenId>> = sensitive
        .positions
        .iter()
        .map(|&p| substitute_candidates_with(diff, p, chosen[p], filter))
        .collect::<Result<_>>()?;
    if pools.iter().any(Vec::is_empty) {
        return Err(domain("vocabulary too small to substitute"));
    }
    let deepest = pools.iter().map(Vec::len).max().unwrap_or(1);
    let make = |count: usize, depth: usize| {
        let mut y = chosen.to_vec();
        for (&p, pool) in sensitive.positions.iter().zip(&pools).take(count) {
            y[p] = pool[depth.min(pool.len() - 1)];
        }
        y
    };

    let s = sensitive.positions.len();
    let mut variants: Vec<Vec<TokenId>> = Vec::with_capacity(k);
    match schedule {
        VariantSchedule::Uniform => {
            let mut depth = 0;
            for _ in 0..k {
                let mut y = make(s, depth);
                while variants.contains(&y) && depth + 1 < deepest {
                    depth += 1;
                    y = make(s, depth);
                }
                variants.push(y);
                depth += 1;
            }
        }
        VariantSchedule::Nested => {
            for r in 1..=k {
                let count = (r * s).div_ceil(k);
                let mut depth = 0;
                let mut y = make(count, depth);
                while variants.contains(&y) && depth + 1 < deepest {
                    depth += 1;
                    y = make(count, depth);
                }
                variants.push(y);
            }
        }
    }
    Ok((sensitive, variants))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub k: usize,
    pub beta: f64,
    pub n: usize,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub schedule: VariantSchedule,
    /// Reserved for a stochastic variant mode; must be false.
    pub sampled: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: 4,
            beta: 0.9,
            n: 10,
            mask_strategy: MaskStrategy::Token,
            mask_ratio: 0.7,
            schedule: VariantSchedule::Nested,
            sampled: false,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(domain(format!("k must be at least 2, got {}", self.k)));
        }
        if self.n == 0 {
            return Err(domain("n must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(domain(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if self.sampled {
            return Err(domain("sampled generation is not implemented"));
        }
        MaskSpec::new(self.mask_strategy, self.mask_ratio, 0).map(|_| ())
    }

    pub fn mask_for(&self, record_seed: u64) -> Result<MaskSpec> {
        MaskSpec::new(self.mask_strategy, self.mask_ratio, record_seed)
    }
}

/// Everything derived for one chosen response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispreferred {
    pub variants: Vec<Vec<TokenId>>,
    pub sensitive: SensitiveSet,
    pub delta: Vec<f64>,
}

/// Teacher-forced full and masked logits for the response rows.
pub fn response_logits(
    model: &ReferenceModel,
    visual: &VisualInput,
    prompt: &[TokenId],
    response: &[TokenId],
    mask: &MaskSpec,
) -> Result<(Tensor, Tensor)> {
    let text: Vec<TokenId> = prompt.iter().chain(response).copied().collect();
    let rows = |vis| -> Result<Tensor> {
        let l = forward_logits(model.params(), &vis, &text)?;
        let v = model.config.vocab_size;
        Tensor::matrix(response.len(), v, l.data()[prompt.len() * v..].to_vec())
    };
    let full = rows(encode_visual(model.params(), visual, None)?)?;
    let masked = rows(encode_visual(model.params(), visual, Some(mask))?)?;
    Ok((full, masked))
}

pub fn generate_dispreferred(
    model: &ReferenceModel,
    visual: &VisualInput,
    prompt: &[TokenId],
    chosen: &[TokenId],
    cfg: &GenerationConfig,
    mask: &MaskSpec,
) -> Result<Dispreferred> {
    if chosen.is_empty() {
        return Err(domain("chosen response is empty"));
    }
    let (full, masked) = response_logits(model, visual, prompt, chosen, mask)?;
    let diff = diff_distribution(&full, &masked, chosen, cfg.beta)?;
    let filter = CandidateFilter::for_vocab(model.config.vocab_size);
    let (sensitive, variants) = build_variants(&diff, chosen, cfg.k, cfg.n, cfg.schedule, &filter)?;
    Ok(Dispreferred {
        variants,
        sensitive,
        delta: diff.delta,
    })
}

/// Mixes a run seed with a record id (splitmix64 finaliser).
pub fn record_seed(run_seed: u64, id: u64) -> u64 {
    let mut z = run_seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct GenerationInput {
    pub id: u64,
    pub visual: VisualInput,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
}

/// One record before re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    pub sensitive: Vec<usize>,
    pub delta: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub records: Vec<RawRecord>,
    pub failures: Vec<(u64, String)>,
}

/// Runs generation over a corpus in parallel; output is ordered like the
/// input. Fails when more than 10% of records fail.
pub fn generation_run(
    reference: &ReferenceModel,
    corpus: &[GenerationInput],
    cfg: &GenerationConfig,
) -> Result<GenerationOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(domain("generation corpus is empty"));
    }
    let results: Vec<std::result::Result<RawRecord, (u64, String)>> = corpus
        .par_iter()
        .map(|item| {
            let seed = record_seed(cfg.seed, item.id);
            let run = || -> Result<RawRecord> {
                let mask = cfg.mask_for(seed)?;
                let d = generate_dispreferred(
                    reference,
                    &item.visual,
                    &item.prompt,
                    &item.chosen,
                    cfg,
                    &mask,
                )?;
                Ok(RawRecord {
                    id: item.id,
                    prompt: item.prompt.clone(),
                    chosen: item.chosen.clone(),
                    candidates: d.variants,
                    sensitive: d.sensitive.positions,
                    delta: d.delta,
                    seed,
                })
            };
            run().map_err(|e| (item.id, e.to_string()))
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    if failures.len() * 10 > corpus.len() {
        return Err(domain(format!(
            "{} of {} records failed; first: record {} ({})",
            failures.len(),
            corpus.len(),
            failures[0].0,
            failures[0].1
        )));
    }
    Ok(GenerationOutcome { records, failures })
}

/// `true` if the candidate only differs from `chosen` at sensitive positions
/// and introduces no special tokens.
pub fn is_local_substitution(chosen: &[TokenId], variant: &[TokenId], sensitive: &[usize]) -> bool {
    chosen.len() == variant.len()
        && chosen
            .iter()
            .zip(variant)
            .enumerate()
            .all(|(i, (a, b))| a == b || (sensitive.contains(&i) && !is_special(*b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::matrix(rows.len(), c, rows.concat()).unwrap()
    }

    #[test]
    fn hand_value() {
        let d =
            diff_distribution(&logits(&[&[2.0, 0.0]]), &logits(&[&[0.0, 0.0]]), &[0], 0.9).unwrap();
        assert!((d.probs[0][0] - 0.97811).abs() < 1e-5);
        assert!((d.probs[0][1] - 0.02189).abs() < 1e-5);
        assert_eq!(d.delta, vec![2.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = logits(&[&[1.0, 2.0]]);
        let b = logits(&[&[1.0, 2.0, 3.0]]);
        assert!(diff_distribution(&a, &b, &[0], 0.5).is_err());
        assert!(diff_distribution(&a, &a, &[0], -1.0).is_err());
        assert!(diff_distribution(&a, &a, &[0, 1], 0.5).is_err());
    }

    fn with_delta(delta: &[f64]) -> DiffDistribution {
        DiffDistribution {
            probs: vec![vec![1.0]; delta.len()],
            delta: delta.to_vec(),
            shifts: vec![vec![0.0]; delta.len()],
            masked_probs: vec![vec![1.0]; delta.len()],
            tokens: vec![0; delta.len()],
        }
    }

    #[test]
    fn sensitive_examples() {
        let s = sensitive_tokens(&with_delta(&[0.1, 5.0, 0.2]), 1).unwrap();
        assert_eq!(s.positions, vec![1]);
        let s = sensitive_tokens(&with_delta(&[0.1, 5.0, 0.2]), 9).unwrap();
        assert_eq!(s.positions, vec![1, 2, 0]);
        let s = sensitive_tokens(&with_delta(&[3.0, 3.0, 1.0]), 2).unwrap();
        assert_eq!(s.positions, vec![0, 1]);
        assert!(sensitive_tokens(&with_delta(&[1.0]), 0).is_err());
    }

    #[test]
    fn two_token_vocab_forces_the_other_token() {
        let d =
            diff_distribution(&logits(&[&[1.0, 0.5]]), &logits(&[&[0.0, 0.3]]), &[1], 0.9).unwrap();
        let open = CandidateFilter {
            p_floor: 0.0,
            excluded: vec![],
        };
        assert_eq!(
            substitute_candidates_with(&d, 0, 1, &open).unwrap(),
            vec![0]
        );
        assert!(substitute_candidates_with(&d, 1, 1, &open).is_err());
    }

    #[test]
    fn implausible_tokens_fall_back_to_full_pool() {
        // masked distribution puts all mass on the chosen token
        let full = logits(&[&[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]]);
        let masked = logits(&[&[0.0, 0.0, 0.0, 0.0, 100.0, 0.0, 0.0]]);
        let d = diff_distribution(&full, &masked, &[4], 0.9).unwrap();
        let c = substitute_candidates(&d, 0, 4).unwrap();
        assert_eq!(c, vec![5, 6]);
    }

    #[test]
    fn uniform_schedule_replaces_every_sensitive_position() {
        let full = logits(&[&[0.0, 1.0, 2.0], &[3.0, 0.0, 1.0]]);
        let masked = logits(&[&[0.5, 0.2, 0.0], &[0.0, 1.0, 0.4]]);
        let chosen = [2, 0];
        let d = diff_distribution(&full, &masked, &chosen, 0.9).unwrap();
        let open = CandidateFilter {
            p_floor: 0.0,
            excluded: vec![],
        };
        let (s, v) = build_variants(&d, &chosen, 2, 2, VariantSchedule::Uniform, &open).unwrap();
        // deltas: 2.0 at position 0, 3.0 at position 1
        assert_eq!(s.positions, vec![1, 0]);
        // position 0 shifts: [-0.5, 0.8, 2.0] -> pool [0, 1]
        // position 1 shifts: [3.0, -1.0, 0.6] -> pool [1, 2]
        assert_eq!(v, vec![vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn nested_schedule_grows_the_edit_set() {
        let row: &[f64] = &[0.0, 4.0, 0.0, 0.0];
        let full = logits(&[row; 4]);
        let zero: &[f64] = &[0.0; 4];
        let masked = logits(&[zero; 4]);
        let chosen = [1, 1, 1, 1];
        let mut d = diff_distribution(&full, &masked, &chosen, 0.9).unwrap();
        d.delta = vec![1.0, 4.0, 3.0, 2.0];
        let open = CandidateFilter {
            p_floor: 0.0,
            excluded: vec![],
        };
        let (s, v) = build_variants(&d, &chosen, 4, 10, VariantSchedule::Nested, &open).unwrap();
        assert_eq!(s.positions, vec![1, 2, 3, 0]);
        let edits: Vec<usize> = v
            .iter()
            .map(|y| y.iter().zip(&chosen).filter(|(a, b)| a != b).count())
            .collect();
        assert_eq!(edits, vec![1, 2, 3, 4]);
        assert_eq!(v[0], vec![1, 0, 1, 1]);
    }

    #[test]
    fn record_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|i| record_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(record_seed(7, 0), record_seed(8, 0));
    }

    #[test]
    fn sampled_mode_is_rejected() {
        let cfg = GenerationConfig {
            sampled: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
