use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hscr_core::vlm::vocab::is_special;
use hscr_core::vlm::{encode_visual, greedy_decode, ModelParams, TokenId};

use crate::corpus::{CorpusEntry, QuestionKind};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of closed questions whose first decoded token is correct.
    pub closed_accuracy: f64,
    /// Mean token recall of the chosen response's content tokens over open
    /// questions.
    pub open_recall: f64,
    pub closed_count: usize,
    pub open_count: usize,
}

/// Multiset recall of `reference`'s non-special tokens inside `decoded`.
pub fn token_recall(reference: &[TokenId], decoded: &[TokenId]) -> f64 {
    let mut avail: HashMap<TokenId, usize> = HashMap::new();
    for &t in decoded {
        *avail.entry(t).or_insert(0) += 1;
    }
    let wanted: Vec<TokenId> = reference
        .iter()
        .copied()
        .filter(|&t| !is_special(t))
        .collect();
    if wanted.is_empty() {
        return 1.0;
    }
    let mut hit = 0;
    for t in &wanted {
        if let Some(n) = avail.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                hit += 1;
            }
        }
    }
    hit as f64 / wanted.len() as f64
}

/// Scores responses produced by `decode` for every entry.
pub fn eval_with<F>(entries: &[CorpusEntry], decode: F) -> Result<EvalMetrics>
where
    F: Fn(&CorpusEntry) -> Result<Vec<TokenId>> + Sync,
{
    if entries.is_empty() {
        return Err(HarnessError::Validation(
            "evaluation corpus is empty".into(),
        ));
    }
    let scored: Vec<(QuestionKind, f64)> = entries
        .par_iter()
        .map(|e| {
            let out = decode(e)?;
            let s = match e.kind {
                QuestionKind::Closed => f64::from(u8::from(out.first() == e.chosen.first())),
                QuestionKind::Open => token_recall(&e.chosen, &out),
            };
            Ok((e.kind, s))
        })
        .collect::<Result<_>>()?;
    let avg = |k: QuestionKind| {
        let v: Vec<f64> = scored.iter().filter(|s| s.0 == k).map(|s| s.1).collect();
        let mean = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        (mean, v.len())
    };
    let (closed_accuracy, closed_count) = avg(QuestionKind::Closed);
    let (open_recall, open_count) = avg(QuestionKind::Open);
    Ok(EvalMetrics {
        closed_accuracy,
        open_recall,
        closed_count,
        open_count,
    })
}

/// Greedy-decodes each prompt (up to twice the chosen length) and scores it.
pub fn eval_accuracy(policy: &ModelParams, entries: &[CorpusEntry]) -> Result<EvalMetrics> {
    let t_max = policy.config.max_text_len;
    eval_with(entries, |e| {
        let vis = encode_visual(policy, &e.visual, None)?;
        let budget = (2 * e.chosen.len()).min(t_max.saturating_sub(e.prompt.len()));
        Ok(greedy_decode(policy, &vis, &e.prompt, budget)?)
    })
}
