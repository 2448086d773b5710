//! Controlled comparisons over one pipeline factor at a time.
//!
//! Every seed trains one SFT model on one pair of corpora; all arms of that
//! seed start from it. Arms that only differ in the loss share their
//! preference data as well.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use hscr_core::mlpo::{margin_report, LossMode, PreferenceRecord};
use hscr_core::vlm::{MaskStrategy, ReferenceModel};

use crate::config::ExperimentConfig;
use crate::corpus::CorpusEntry;
use crate::error::{HarnessError, Result};
use crate::eval::eval_accuracy;
use crate::pipeline::{
    build_corpora, generate, mean_abs_delta, rerank_lines, run_sft, run_training, to_records,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    MaskStrategy,
    MaskRatio,
    LossMode,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MaskStrategy => "mask_strategy",
            Self::MaskRatio => "mask_ratio",
            Self::LossMode => "loss_mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub loss_mode: LossMode,
}

pub fn arms(cfg: &ExperimentConfig, kind: AblationKind) -> Vec<Arm> {
    let base = Arm {
        label: String::new(),
        mask_strategy: cfg.generation.mask_strategy,
        mask_ratio: cfg.generation.mask_ratio,
        loss_mode: cfg.train.loss_mode,
    };
    let a = &cfg.ablation;
    match kind {
        AblationKind::MaskStrategy => a
            .mask_strategies
            .iter()
            .map(|&s| Arm {
                label: s.name().into(),
                mask_strategy: s,
                ..base.clone()
            })
            .collect(),
        AblationKind::MaskRatio => a
            .mask_ratios
            .iter()
            .map(|&r| Arm {
                label: format!("{r}"),
                mask_ratio: r,
                ..base.clone()
            })
            .collect(),
        AblationKind::LossMode => a
            .loss_modes
            .iter()
            .map(|&m| Arm {
                label: m.name().into(),
                loss_mode: m,
                ..base.clone()
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub closed_accuracy: f64,
    pub open_recall: f64,
    /// Held-out mean of `g(y_w) - g(y_l1)`.
    pub reward_margin_mean: f64,
    /// Held-out mean of `log pi(y_w) - log pi(y_l1)`, policy minus SFT.
    pub logprob_margin_gain: f64,
    pub rank_order_fraction: f64,
    /// Mean `|delta_t|` over the training candidates.
    pub mean_abs_delta: f64,
    pub train_records: usize,
    pub dropped_records: usize,
    pub generation_failures: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub label: String,
    pub seed: u64,
    pub metrics: Option<ArmMetrics>,
    pub error: Option<String>,
}

/// The SFT model itself, scored like an arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub seed: u64,
    pub closed_accuracy: f64,
    pub open_recall: f64,
    pub reward_margin_mean: f64,
    pub rank_order_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    /// Means over successful runs; `None` when there are none.
    pub closed_accuracy: Option<f64>,
    pub open_recall: Option<f64>,
    pub reward_margin_mean: Option<f64>,
    pub rank_order_fraction: Option<f64>,
    pub mean_abs_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub baseline: Vec<BaselineRun>,
    pub baseline_summary: Option<ArmSummary>,
    pub runs: Vec<ArmRun>,
    pub summary: Vec<ArmSummary>,
    pub wall_time_seconds: f64,
}

impl AblationReport {
    pub fn arm(&self, label: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.label == label)
    }
}

struct Prepared {
    train: Vec<PreferenceRecord>,
    held_out: Vec<PreferenceRecord>,
    mean_abs_delta: f64,
    dropped: usize,
    failures: usize,
}

fn prepare(
    cfg: &ExperimentConfig,
    reference: &ReferenceModel,
    train: &[CorpusEntry],
    eval: &[CorpusEntry],
) -> Result<Prepared> {
    let gen = cfg.generation_config();
    let g_train = generate(cfg, &gen, reference, train)?;
    let g_eval = generate(cfg, &gen, reference, eval)?;
    let r_train = rerank_lines(cfg, &g_train.lines)?;
    let r_eval = rerank_lines(cfg, &g_eval.lines)?;
    Ok(Prepared {
        train: to_records(&r_train.lines, &cfg.model)?,
        held_out: to_records(&r_eval.lines, &cfg.model)?,
        mean_abs_delta: mean_abs_delta(&g_train.lines),
        dropped: r_train.dropped.len(),
        failures: g_train.failures.len(),
    })
}

fn arm_config(base: &ExperimentConfig, arm: &Arm) -> ExperimentConfig {
    let mut c = base.clone();
    c.generation.mask_strategy = arm.mask_strategy;
    c.generation.mask_ratio = arm.mask_ratio;
    c.train.loss_mode = arm.loss_mode;
    c
}

fn run_arm(
    cfg: &ExperimentConfig,
    reference: &ReferenceModel,
    eval: &[CorpusEntry],
    data: &Prepared,
    sft_margin: f64,
) -> Result<ArmMetrics> {
    let started = Instant::now();
    let out = run_training(reference, &data.train, None, &cfg.train_config())?;
    let acc = eval_accuracy(&out.policy, eval)?;
    let m = margin_report(&out.policy, reference, &data.held_out, cfg.train.gamma)?;
    Ok(ArmMetrics {
        closed_accuracy: acc.closed_accuracy,
        open_recall: acc.open_recall,
        reward_margin_mean: m.reward_margin_mean,
        logprob_margin_gain: m.logprob_margin_mean - sft_margin,
        rank_order_fraction: m.reward_order_fraction,
        mean_abs_delta: data.mean_abs_delta,
        train_records: data.train.len(),
        dropped_records: data.dropped,
        generation_failures: data.failures,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "arm panicked".into())
}

/// Runs one seed: shared SFT, baseline row, then every arm. Arm errors are
/// recorded and do not stop the remaining arms.
fn run_seed(
    base: &ExperimentConfig,
    arms: &[Arm],
    seed: u64,
) -> Result<(BaselineRun, Vec<ArmRun>)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let corpora = build_corpora(&cfg)?;
    let reference = run_sft(&cfg, &corpora.train)?.model;

    let shared = prepare(&cfg, &reference, &corpora.train, &corpora.eval)?;
    let sft_acc = eval_accuracy(&reference, &corpora.eval)?;
    let sft_m = margin_report(&reference, &reference, &shared.held_out, cfg.train.gamma)?;
    let baseline = BaselineRun {
        seed,
        closed_accuracy: sft_acc.closed_accuracy,
        open_recall: sft_acc.open_recall,
        reward_margin_mean: sft_m.reward_margin_mean,
        rank_order_fraction: sft_m.reward_order_fraction,
    };

    let base_key = (
        cfg.generation.mask_strategy,
        cfg.generation.mask_ratio.to_bits(),
    );
    let mut cache: HashMap<(MaskStrategy, u64), Prepared> = HashMap::new();
    cache.insert(base_key, shared);
    let mut runs = Vec::with_capacity(arms.len());
    for arm in arms {
        let ac = arm_config(&cfg, arm);
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<ArmMetrics> {
            let key = (arm.mask_strategy, arm.mask_ratio.to_bits());
            let data = match cache.entry(key) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(v) => {
                    v.insert(prepare(&ac, &reference, &corpora.train, &corpora.eval)?)
                }
            };
            let sft = margin_report(&reference, &reference, &data.held_out, ac.train.gamma)?;
            run_arm(
                &ac,
                &reference,
                &corpora.eval,
                data,
                sft.logprob_margin_mean,
            )
        }))
        .unwrap_or_else(|p| Err(HarnessError::Validation(panic_message(p))));
        let (metrics, error) = match outcome {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        runs.push(ArmRun {
            label: arm.label.clone(),
            seed,
            metrics,
            error,
        });
    }
    Ok((baseline, runs))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(label: &str, runs: &[&ArmRun]) -> ArmSummary {
    let ok: Vec<&ArmMetrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    ArmSummary {
        label: label.into(),
        runs: ok.len(),
        failures: runs.len() - ok.len(),
        closed_accuracy: mean(ok.iter().map(|m| m.closed_accuracy)),
        open_recall: mean(ok.iter().map(|m| m.open_recall)),
        reward_margin_mean: mean(ok.iter().map(|m| m.reward_margin_mean)),
        rank_order_fraction: mean(ok.iter().map(|m| m.rank_order_fraction)),
        mean_abs_delta: mean(ok.iter().map(|m| m.mean_abs_delta)),
    }
}

pub fn run_ablation(cfg: &ExperimentConfig, kind: AblationKind) -> Result<AblationReport> {
    cfg.validate()?;
    let started = Instant::now();
    let arm_list = arms(cfg, kind);
    if arm_list.is_empty() {
        return Err(HarnessError::Validation(format!(
            "no arms configured for {}",
            kind.name()
        )));
    }
    for arm in &arm_list {
        arm_config(cfg, arm).validate()?;
    }
    let mut baseline = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.ablation.seeds {
        match run_seed(cfg, &arm_list, seed) {
            Ok((b, r)) => {
                baseline.push(b);
                runs.extend(r);
            }
            Err(e) => runs.extend(arm_list.iter().map(|a| ArmRun {
                label: a.label.clone(),
                seed,
                metrics: None,
                error: Some(format!("seed setup failed: {e}")),
            })),
        }
    }
    let summary = arm_list
        .iter()
        .map(|a| {
            let rs: Vec<&ArmRun> = runs.iter().filter(|r| r.label == a.label).collect();
            summarize(&a.label, &rs)
        })
        .collect();
    let baseline_summary = (!baseline.is_empty()).then(|| ArmSummary {
        label: "sft".into(),
        runs: baseline.len(),
        failures: cfg.ablation.seeds.len() - baseline.len(),
        closed_accuracy: mean(baseline.iter().map(|b| b.closed_accuracy)),
        open_recall: mean(baseline.iter().map(|b| b.open_recall)),
        reward_margin_mean: mean(baseline.iter().map(|b| b.reward_margin_mean)),
        rank_order_fraction: mean(baseline.iter().map(|b| b.rank_order_fraction)),
        mean_abs_delta: None,
    });
    Ok(AblationReport {
        kind,
        seeds: cfg.ablation.seeds.clone(),
        arms: arm_list,
        baseline,
        baseline_summary,
        runs,
        summary,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Aligned plain-text table of the per-arm means.
pub fn render_table(report: &AblationReport) -> String {
    let header = [
        report.kind.name(),
        "runs",
        "failed",
        "closed_acc",
        "open_recall",
        "reward_margin",
        "rank_order",
        "mean_abs_delta",
    ];
    let fmt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for s in report.baseline_summary.iter().chain(&report.summary) {
        rows.push(vec![
            s.label.clone(),
            s.runs.to_string(),
            s.failures.to_string(),
            fmt(s.closed_accuracy),
            fmt(s.open_recall),
            fmt(s.reward_margin_mean),
            fmt(s.rank_order_fraction),
            fmt(s.mean_abs_delta),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_sets_match_config() {
        let c = ExperimentConfig::default();
        let labels = |k| arms(&c, k).into_iter().map(|a| a.label).collect::<Vec<_>>();
        assert_eq!(
            labels(AblationKind::MaskStrategy),
            ["pixel", "patch", "latent", "token"]
        );
        assert_eq!(
            labels(AblationKind::MaskRatio),
            ["0.3", "0.5", "0.7", "0.9"]
        );
        assert_eq!(
            labels(AblationKind::LossMode),
            ["explicit_only", "implicit_only", "hscr", "dpo"]
        );
    }

    #[test]
    fn only_the_varied_factor_changes() {
        let c = ExperimentConfig::default();
        for a in arms(&c, AblationKind::MaskRatio) {
            assert_eq!(a.mask_strategy, c.generation.mask_strategy);
            assert_eq!(a.loss_mode, c.train.loss_mode);
        }
        for a in arms(&c, AblationKind::LossMode) {
            assert_eq!(a.mask_ratio, c.generation.mask_ratio);
        }
    }

    #[test]
    fn table_is_aligned() {
        let s = |label: &str, acc| ArmSummary {
            label: label.into(),
            runs: 1,
            failures: 0,
            closed_accuracy: Some(acc),
            open_recall: Some(1.0),
            reward_margin_mean: Some(0.5),
            rank_order_fraction: Some(1.0),
            mean_abs_delta: None,
        };
        let report = AblationReport {
            kind: AblationKind::LossMode,
            seeds: vec![0],
            arms: vec![],
            baseline: vec![],
            baseline_summary: Some(s("sft", 0.9)),
            runs: vec![],
            summary: vec![s("implicit_only", 0.85)],
            wall_time_seconds: 0.0,
        };
        let t = render_table(&report);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].len(), lines[1].len());
        assert_eq!(lines[0].len(), lines[3].len());
        assert!(lines[3].starts_with("implicit_only"));
    }
}
