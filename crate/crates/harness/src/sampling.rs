//! How likely the reference model finds the dispreferred responses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hscr_core::mlpo::PreferenceRecord;
use hscr_core::prefgen::record_seed;
use hscr_core::vlm::vocab::FIRST_CONTENT;
use hscr_core::vlm::{sequence_logprobs, ReferenceModel, TokenId};

use crate::error::{HarnessError, Result};

pub const BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `BINS + 1` bin edges on `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram on `[0, 1]`; the last bin is closed on the right.
pub fn histogram(values: &[f64]) -> Histogram {
    let mut counts = vec![0usize; BINS];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    Histogram {
        edges: (0..=BINS).map(|i| i as f64 / BINS as f64).collect(),
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub responses: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

impl SamplingSummary {
    fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(HarnessError::Validation(
                "no rejected responses to score".into(),
            ));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            responses: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: hscr_core::mlpo::median(values),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            histogram: histogram(values),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub self_generated: SamplingSummary,
    /// Same statistics for the simulated external rejects, when supplied.
    pub external: Option<SamplingSummary>,
}

/// `exp(mean token log-probability)` of every rejected response.
pub fn per_token_probabilities(
    reference: &ReferenceModel,
    records: &[PreferenceRecord],
) -> Result<Vec<f64>> {
    let per_record: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| {
            let ys: Vec<&[TokenId]> = r.rejected.iter().map(|c| c.tokens.as_slice()).collect();
            let lps = sequence_logprobs(reference, &r.visual, &r.prompt, &ys)?;
            Ok(lps
                .iter()
                .zip(&ys)
                .map(|(lp, y)| (lp / y.len() as f64).exp())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

pub fn sampling_probability_report(
    reference: &ReferenceModel,
    records: &[PreferenceRecord],
    external: Option<&[PreferenceRecord]>,
) -> Result<SamplingReport> {
    if records.is_empty() {
        return Err(HarnessError::Validation(
            "sampling report needs records".into(),
        ));
    }
    let self_generated =
        SamplingSummary::from_values(&per_token_probabilities(reference, records)?)?;
    let external = match external {
        Some([]) => return Err(HarnessError::Validation("external dataset is empty".into())),
        Some(ext) => Some(SamplingSummary::from_values(&per_token_probabilities(
            reference, ext,
        )?)?),
        None => None,
    };
    Ok(SamplingReport {
        self_generated,
        external,
    })
}

/// Stand-in for rejects written by another model: every rejected response is
/// replaced by uniformly drawn non-special tokens of the same length.
pub fn scrambled_external(
    records: &[PreferenceRecord],
    vocab_size: usize,
    seed: u64,
) -> Vec<PreferenceRecord> {
    records
        .iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, r.id));
            let mut out = r.clone();
            for c in &mut out.rejected {
                for t in &mut c.tokens {
                    *t = rng.random_range(FIRST_CONTENT as usize..vocab_size) as TokenId;
                }
            }
            out
        })
        .collect()
}
