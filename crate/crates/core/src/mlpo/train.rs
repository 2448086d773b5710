use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{logprobs, record_loss_graph, LossBreakdown, LossMode, PreferenceRecord, RefLogprobs};
use crate::error::{domain, Error, Result};
use crate::tensor::{Adam, AdamConfig};
use crate::vlm::{batch_gradients, ModelParams, ReferenceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            learning_rate: 1e-4,
            epochs: 2,
            batch_size: 16,
            seed: 0,
            loss_mode: LossMode::Hscr,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(domain(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(domain(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(domain("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_explicit: f64,
    pub loss_implicit: f64,
    /// Mean of `g(y_w) - g(y_l1)` over the monitored records.
    pub margin_mean: f64,
    pub margin_median: f64,
    /// Mean of `g(y_l1) - g(y_lj)`.
    pub tail_margin_mean: f64,
    pub rank_order_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub records: usize,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
    pub step_losses: Vec<f64>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ModelParams,
    pub report: TrainingReport,
}

/// Optimizes `policy` against the frozen `reference`. Margins in the report
/// are measured on `monitor` when given, otherwise on the training data.
pub fn train(
    policy: ModelParams,
    reference: &ReferenceModel,
    dataset: &[PreferenceRecord],
    cfg: &TrainConfig,
    monitor: Option<&[PreferenceRecord]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(domain("training dataset is empty"));
    }
    if policy.config != reference.config {
        return Err(domain("policy and reference configs differ"));
    }
    for rec in dataset {
        rec.validate(&policy.config, cfg.loss_mode.min_rejected())?;
    }
    let started = Instant::now();
    let refs: Vec<RefLogprobs> = dataset
        .par_iter()
        .map(|r| RefLogprobs::compute(reference.params(), r))
        .collect::<Result<_>>()?;
    let items: Vec<(&PreferenceRecord, &RefLogprobs)> = dataset.iter().zip(&refs).collect();

    let mut params = policy;
    let mut opt = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step_losses = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if step_losses.len() >= budget {
                break 'outer;
            }
            let batch: Vec<(&PreferenceRecord, &RefLogprobs)> =
                chunk.iter().map(|&i| items[i]).collect();
            let (loss, grads, parts) = batch_gradients(&params, &batch, |g, dec, (rec, r)| {
                record_loss_graph(g, dec, rec, r, cfg.gamma, cfg.loss_mode)
            })?;
            let step = step_losses.len();
            if !loss.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite {} loss {loss}", cfg.loss_mode),
                    last_finite: Box::new(params),
                });
            }
            let before = params.clone();
            opt.step(&mut params.tensors_mut(), &grads, cfg.learning_rate)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite parameters after update".into(),
                    last_finite: Box::new(before),
                });
            }
            step_losses.push(loss);
            for p in &parts {
                sum.total += p.total;
                sum.explicit += p.explicit;
                sum.implicit += p.implicit;
            }
            seen += parts.len();
        }
        let m = margin_report(&params, reference, monitor.unwrap_or(dataset), cfg.gamma)?;
        let n = seen.max(1) as f64;
        epochs.push(EpochStats {
            epoch,
            loss_total: sum.total / n,
            loss_explicit: sum.explicit / n,
            loss_implicit: sum.implicit / n,
            margin_mean: m.reward_margin_mean,
            margin_median: m.reward_margin_median,
            tail_margin_mean: m.reward_tail_mean,
            rank_order_fraction: m.reward_order_fraction,
        });
    }
    let report = TrainingReport {
        config: cfg.clone(),
        records: dataset.len(),
        steps: step_losses.len(),
        epochs,
        step_losses,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        policy: params,
        report,
    })
}

/// Margins of one record, chosen first then rejected by rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMargins {
    pub id: u64,
    /// `log pi(y_w) - log pi(y_l1)` under the policy.
    pub logprob_margin: f64,
    /// Consecutive policy log-prob gaps `y_w - y_l1, y_l1 - y_l2, ...`.
    pub logprob_ranks: Vec<f64>,
    /// `g(y_w) - g(y_l1)`.
    pub reward_margin: f64,
    /// `g(y_l1) - g(y_lj)`; zero with one rejected response.
    pub reward_tail: f64,
    /// Consecutive implicit-reward gaps.
    pub reward_ranks: Vec<f64>,
}

impl RecordMargins {
    pub fn logprob_ordered(&self) -> bool {
        self.logprob_ranks.iter().all(|&d| d > 0.0)
    }

    pub fn reward_ordered(&self) -> bool {
        self.reward_ranks.iter().all(|&d| d > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub records: Vec<RecordMargins>,
    pub logprob_margin_mean: f64,
    pub logprob_margin_median: f64,
    pub logprob_order_fraction: f64,
    pub reward_margin_mean: f64,
    pub reward_margin_median: f64,
    pub reward_tail_mean: f64,
    pub reward_order_fraction: f64,
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn gaps(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[0] - w[1]).collect()
}

pub fn margin_report(
    policy: &ModelParams,
    reference: &ReferenceModel,
    dataset: &[PreferenceRecord],
    gamma: f64,
) -> Result<MarginReport> {
    if dataset.is_empty() {
        return Err(domain("margin report over an empty dataset"));
    }
    let records: Vec<RecordMargins> = dataset
        .par_iter()
        .map(|rec| {
            if rec.rejected.is_empty() {
                return Err(domain(format!(
                    "record {} has no rejected response",
                    rec.id
                )));
            }
            let (pc, pr) = logprobs(policy, rec)?;
            let (rc, rr) = logprobs(reference.params(), rec)?;
            let lp: Vec<f64> = std::iter::once(pc).chain(pr.iter().copied()).collect();
            let reward: Vec<f64> = std::iter::once(gamma * (pc - rc))
                .chain(pr.iter().zip(&rr).map(|(p, r)| gamma * (p - r)))
                .collect();
            Ok(RecordMargins {
                id: rec.id,
                logprob_margin: lp[0] - lp[1],
                logprob_ranks: gaps(&lp),
                reward_margin: reward[0] - reward[1],
                reward_tail: reward[1] - reward[reward.len() - 1],
                reward_ranks: gaps(&reward),
            })
        })
        .collect::<Result<_>>()?;
    let lm: Vec<f64> = records.iter().map(|r| r.logprob_margin).collect();
    let rm: Vec<f64> = records.iter().map(|r| r.reward_margin).collect();
    let tails: Vec<f64> = records.iter().map(|r| r.reward_tail).collect();
    let n = records.len() as f64;
    Ok(MarginReport {
        logprob_margin_mean: mean(&lm),
        logprob_margin_median: median(&lm),
        logprob_order_fraction: records.iter().filter(|r| r.logprob_ordered()).count() as f64 / n,
        reward_margin_mean: mean(&rm),
        reward_margin_median: median(&rm),
        reward_tail_mean: mean(&tails),
        reward_order_fraction: records.iter().filter(|r| r.reward_ordered()).count() as f64 / n,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rerank::RankedCandidate;
    use crate::vlm::vocab::{BOS, EOS};
    use crate::vlm::{ModelConfig, Scene, SceneLayout, TokenId, VisualInput};

    #[test]
    fn median_matches_sorting() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn dataset(cfg: &ModelConfig, n: usize) -> Vec<PreferenceRecord> {
        (0..n as u64)
            .map(|id| {
                let a = (id % 8) as u8;
                let scene = Scene::new(vec![a, 7 - a, a / 2, 3], SceneLayout::default()).unwrap();
                let visual =
                    VisualInput::render(&scene, SceneLayout::default(), cfg, 0.2, id).unwrap();
                let v = |x: u8| 12 + x as TokenId;
                let chosen = vec![v(a), v(a), v(7 - a), v(a / 2), v(3), EOS];
                let mut l1 = chosen.clone();
                l1[0] = v((a + 1) % 8);
                let mut l2 = l1.clone();
                l2[1] = v((a + 2) % 8);
                let rejected = [l1, l2]
                    .into_iter()
                    .enumerate()
                    .map(|(i, tokens)| RankedCandidate {
                        tokens,
                        similarity: 0.0,
                        rank: i + 1,
                    })
                    .collect();
                PreferenceRecord {
                    id,
                    visual,
                    prompt: vec![BOS, 6, 7, 8],
                    chosen,
                    rejected,
                }
            })
            .collect()
    }

    #[test]
    fn zero_steps_keep_the_reference() {
        let cfg = ModelConfig::default();
        let reference = ReferenceModel::freeze(ModelParams::init(cfg.clone(), 1).unwrap());
        let data = dataset(&cfg, 4);
        let tc = TrainConfig {
            max_steps: Some(0),
            ..Default::default()
        };
        let out = train(reference.thaw_copy(), &reference, &data, &tc, None).unwrap();
        assert!(out.policy.bitwise_eq(&reference));
        assert_eq!(out.report.steps, 0);
    }

    #[test]
    fn training_raises_margins_and_leaves_reference_alone() {
        let cfg = ModelConfig::default();
        let reference = ReferenceModel::freeze(ModelParams::init(cfg.clone(), 1).unwrap());
        let snapshot = reference.params().clone();
        let data = dataset(&cfg, 16);
        let tc = TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(reference.thaw_copy(), &reference, &data, &tc, None).unwrap();
        assert!(reference.params().bitwise_eq(&snapshot));
        let m = margin_report(&out.policy, &reference, &data, tc.gamma).unwrap();
        assert!(m.reward_margin_mean > 0.0);
        assert_eq!(out.report.epochs.len(), 3);
        let first = out.report.epochs[0].loss_total;
        let last = out.report.epochs[2].loss_total;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig::default();
        let reference = ReferenceModel::freeze(ModelParams::init(cfg.clone(), 2).unwrap());
        let data = dataset(&cfg, 8);
        let tc = TrainConfig {
            batch_size: 3,
            loss_mode: LossMode::Dpo,
            ..Default::default()
        };
        let a = train(reference.thaw_copy(), &reference, &data, &tc, None).unwrap();
        let b = train(reference.thaw_copy(), &reference, &data, &tc, None).unwrap();
        assert!(a.policy.bitwise_eq(&b.policy));
        assert_eq!(a.report.step_losses, b.report.step_losses);
    }

    #[test]
    fn margins_at_initialisation_are_zero() {
        let cfg = ModelConfig::default();
        let reference = ReferenceModel::freeze(ModelParams::init(cfg.clone(), 2).unwrap());
        let data = dataset(&cfg, 5);
        let m = margin_report(reference.params(), &reference, &data, 0.1).unwrap();
        assert_eq!(m.reward_margin_mean, 0.0);
        assert_eq!(m.reward_order_fraction, 0.0);
        let oracle = median(
            &m.records
                .iter()
                .map(|r| r.logprob_margin)
                .collect::<Vec<_>>(),
        );
        assert_eq!(m.logprob_margin_median, oracle);
    }

    #[test]
    fn implicit_mode_rejects_single_candidate_records() {
        let cfg = ModelConfig::default();
        let reference = ReferenceModel::freeze(ModelParams::init(cfg.clone(), 2).unwrap());
        let mut data = dataset(&cfg, 2);
        data[1].rejected.truncate(1);
        let tc = TrainConfig::default();
        assert!(train(reference.thaw_copy(), &reference, &data, &tc, None).is_err());
        let dpo = TrainConfig {
            loss_mode: LossMode::Dpo,
            ..Default::default()
        };
        assert!(train(reference.thaw_copy(), &reference, &data, &dpo, None).is_ok());
    }
}
