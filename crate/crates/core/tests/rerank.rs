use hscr_core::rerank::{rerank_and_select, select_by_similarity, similarity};
use hscr_core::vlm::vocab::is_special;
use hscr_core::vlm::TokenId;
use proptest::prelude::*;

/// Dice by sorting both sides and merging.
fn dice_oracle(a: &[TokenId], b: &[TokenId]) -> f64 {
    let mut x: Vec<_> = a.iter().copied().filter(|&t| !is_special(t)).collect();
    let mut y: Vec<_> = b.iter().copied().filter(|&t| !is_special(t)).collect();
    x.sort_unstable();
    y.sort_unstable();
    let (mut i, mut j, mut common) = (0, 0, 0);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    2.0 * common as f64 / (x.len() + y.len()) as f64
}

#[test]
fn listed_examples() {
    assert_eq!(similarity(&[5, 6, 7, 8], &[5, 6, 9, 10]).unwrap(), 0.5);
    assert_eq!(similarity(&[9, 9, 9], &[9, 9, 9]).unwrap(), 1.0);
    assert_eq!(similarity(&[4, 5], &[6, 7]).unwrap(), 0.0);
    assert!(similarity(&[4], &[]).is_err());
    let picked = select_by_similarity(&[0.9, 0.85, 0.7, 0.4], 3, 0.1).unwrap();
    let sims: Vec<f64> = picked.iter().map(|&i| [0.9, 0.85, 0.7, 0.4][i]).collect();
    assert_eq!(sims, vec![0.9, 0.7, 0.4]);
}

fn seq() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(4u32..20, 1..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dice_matches_merge_count(a in seq(), b in seq()) {
        let s = similarity(&a, &b).unwrap();
        prop_assert!((s - dice_oracle(&a, &b)).abs() < 1e-15);
        prop_assert_eq!(s, similarity(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn permutations_are_similarity_one(a in seq(), rot in 0usize..10) {
        let mut b = a.clone();
        let r = rot % b.len();
        b.rotate_left(r);
        prop_assert_eq!(similarity(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn selection_contract(chosen in seq(), cands in prop::collection::vec(seq(), 1..8), j in 2usize..5) {
        let out = rerank_and_select(&chosen, &cands, j, 0.1).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= j);
        for (i, c) in out.iter().enumerate() {
            prop_assert_eq!(c.rank, i + 1);
            prop_assert_eq!(c.similarity, similarity(&c.tokens, &chosen).unwrap());
        }
        for w in out.windows(2) {
            prop_assert!(w[0].similarity > w[1].similarity);
            prop_assert!(w[0].similarity - w[1].similarity >= 0.1 - 1e-12);
        }
        let again: Vec<_> = out.iter().map(|c| c.tokens.clone()).collect();
        prop_assert_eq!(rerank_and_select(&chosen, &again, j, 0.1).unwrap(), out);
    }
}
