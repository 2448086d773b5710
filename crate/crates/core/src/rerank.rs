use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::vlm::vocab::is_special;
use crate::vlm::TokenId;

/// A dispreferred response after re-ranking. Rank 1 is closest to the
/// chosen response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub tokens: Vec<TokenId>,
    pub similarity: f64,
    pub rank: usize,
}

fn counts(s: &[TokenId]) -> HashMap<TokenId, usize> {
    let mut m = HashMap::new();
    for &t in s.iter().filter(|&&t| !is_special(t)) {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Multiset Dice coefficient over non-special tokens.
///
/// Two sequences with no content tokens at all compare as 1.0 when they are
/// equal as multisets and 0.0 otherwise.
pub fn similarity(a: &[TokenId], b: &[TokenId]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain("similarity of an empty sequence"));
    }
    let (ca, cb) = (counts(a), counts(b));
    let (na, nb): (usize, usize) = (ca.values().sum(), cb.values().sum());
    if na + nb == 0 {
        let (mut sa, mut sb) = (a.to_vec(), b.to_vec());
        sa.sort_unstable();
        sb.sort_unstable();
        return Ok(if sa == sb { 1.0 } else { 0.0 });
    }
    let inter: usize = ca
        .iter()
        .map(|(t, &n)| n.min(cb.get(t).copied().unwrap_or(0)))
        .sum();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Greedy gap-separated selection over precomputed similarities. Returns
/// indices into `sims` in selection order.
pub fn select_by_similarity(sims: &[f64], j: usize, gap: f64) -> Result<Vec<usize>> {
    if j < 2 {
        return Err(domain(format!("j must be at least 2, got {j}")));
    }
    if !(gap >= 0.0 && gap.is_finite()) {
        return Err(domain(format!("gap must be finite and >= 0, got {gap}")));
    }
    if let Some(s) = sims.iter().find(|s| !s.is_finite()) {
        return Err(domain(format!("non-finite similarity {s}")));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::with_capacity(j);
    for i in order {
        if picked.len() == j {
            break;
        }
        let ok = match picked.last() {
            None => true,
            Some(&last) => sims[i] < sims[last] && sims[i] <= sims[last] - gap + 1e-12,
        };
        if ok {
            picked.push(i);
        }
    }
    Ok(picked)
}

/// Scores candidates against `chosen` and keeps at most `j` of them whose
/// similarities step down by at least `gap`. Under-filled selections are
/// returned as they are.
pub fn rerank_and_select(
    chosen: &[TokenId],
    candidates: &[Vec<TokenId>],
    j: usize,
    gap: f64,
) -> Result<Vec<RankedCandidate>> {
    let sims: Vec<f64> = candidates
        .iter()
        .map(|c| similarity(c, chosen))
        .collect::<Result<_>>()?;
    Ok(select_by_similarity(&sims, j, gap)?
        .into_iter()
        .enumerate()
        .map(|(r, i)| RankedCandidate {
            tokens: candidates[i].clone(),
            similarity: sims[i],
            rank: r + 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::vocab::{EOS, PAD};
    use proptest::prelude::*;

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[5, 6, 7], &[5, 6, 7]).unwrap(), 1.0);
        assert_eq!(similarity(&[5, 6], &[7, 8]).unwrap(), 0.0);
        assert_eq!(similarity(&[5, 6, 7, 8], &[5, 6, 9, 10]).unwrap(), 0.5);
        assert_eq!(similarity(&[5, 5, 6], &[5, 6, 6]).unwrap(), 2.0 * 2.0 / 6.0);
        assert_eq!(similarity(&[5, 6, EOS], &[6, 5, PAD]).unwrap(), 1.0);
        assert_eq!(similarity(&[EOS], &[EOS]).unwrap(), 1.0);
        assert_eq!(similarity(&[EOS], &[PAD]).unwrap(), 0.0);
        assert!(similarity(&[], &[5]).is_err());
    }

    #[test]
    fn worked_selection() {
        let picked = select_by_similarity(&[0.9, 0.85, 0.7, 0.4], 3, 0.1).unwrap();
        assert_eq!(picked, vec![0, 2, 3]);
        assert_eq!(
            select_by_similarity(&[1.0, 0.0], 2, 0.1).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            select_by_similarity(&[0.5, 0.5, 0.5], 3, 0.1).unwrap(),
            vec![0]
        );
        assert!(select_by_similarity(&[0.5], 1, 0.1).is_err());
        assert!(select_by_similarity(&[0.5], 2, -0.1).is_err());
    }

    #[test]
    fn ranks_follow_selection() {
        let chosen = vec![5, 6, 7, 8, EOS];
        let cands = vec![
            vec![9, 10, 11, 12, EOS],
            vec![5, 6, 7, 9, EOS],
            vec![5, 9, 10, 8, EOS],
        ];
        let r = rerank_and_select(&chosen, &cands, 3, 0.1).unwrap();
        let got: Vec<(usize, f64)> = r.iter().map(|c| (c.rank, c.similarity)).collect();
        assert_eq!(got, vec![(1, 0.75), (2, 0.5), (3, 0.0)]);
        assert_eq!(r[0].tokens, cands[1]);
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_and_bounded(
            a in prop::collection::vec(0u32..12, 1..10),
            b in prop::collection::vec(0u32..12, 1..10),
        ) {
            let ab = similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, similarity(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn selection_steps_down_by_gap(
            sims in prop::collection::vec(0.0f64..=1.0, 0..12),
            j in 2usize..6,
            gap in 0.0f64..0.5,
        ) {
            let picked = select_by_similarity(&sims, j, gap).unwrap();
            prop_assert!(picked.len() <= j);
            for w in picked.windows(2) {
                prop_assert!(sims[w[1]] < sims[w[0]]);
                prop_assert!(sims[w[0]] - sims[w[1]] >= gap - 1e-12);
            }
            if !sims.is_empty() {
                let top = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(sims[picked[0]], top);
            }
        }

        #[test]
        fn rerank_is_a_fixed_point(
            chosen in prop::collection::vec(4u32..10, 1..7),
            cands in prop::collection::vec(prop::collection::vec(4u32..10, 1..7), 0..8),
        ) {
            let once = rerank_and_select(&chosen, &cands, 3, 0.1).unwrap();
            let tokens: Vec<Vec<TokenId>> = once.iter().map(|c| c.tokens.clone()).collect();
            let twice = rerank_and_select(&chosen, &tokens, 3, 0.1).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn selection_ignores_input_order(
            sims in prop::collection::vec(0u8..=10, 0..10),
            rot in 0usize..10,
        ) {
            // distinct values so the tie-break cannot matter
            let mut uniq: Vec<f64> = sims.iter().map(|&s| s as f64 / 10.0).collect();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            let mut shuffled = uniq.clone();
            if !shuffled.is_empty() {
                let r = rot % shuffled.len();
                shuffled.rotate_left(r);
            }
            let a: Vec<f64> = select_by_similarity(&uniq, 3, 0.1).unwrap().iter().map(|&i| uniq[i]).collect();
            let b: Vec<f64> = select_by_similarity(&shuffled, 3, 0.1).unwrap().iter().map(|&i| shuffled[i]).collect();
            prop_assert_eq!(a, b);
        }
    }
}
