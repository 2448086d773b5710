//! Finite-difference verification of every preference loss on a small model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use hscr_core::mlpo::{record_loss_graph, LossMode, PreferenceRecord, RefLogprobs};
use hscr_core::rerank::{similarity, RankedCandidate};
use hscr_core::tensor::{finite_diff_check, GradCheckReport, Graph, Tensor, Var};
use hscr_core::vlm::vocab::FIRST_CONTENT;
use hscr_core::vlm::{Decoder, ModelParams, ParamVars, TokenId};

use crate::config::{ExperimentConfig, Stage};
use crate::corpus::{make_corpus, CorpusSpec};
use crate::error::{HarnessError, Result};

/// Rejected responses per synthetic record.
const REJECTED: usize = 3;
/// Std of the reference's offset from the policy.
const REFERENCE_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct ModeCheck {
    pub loss_mode: LossMode,
    pub loss: f64,
    pub seconds: f64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRun {
    pub parameters: usize,
    pub records: usize,
    pub step: f64,
    pub tolerance: f64,
    pub gamma: f64,
    pub modes: Vec<ModeCheck>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Records whose rejected responses replace 1, 2, ... content positions of the
/// chosen response with random content tokens.
fn records(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PreferenceRecord>> {
    let gc = &cfg.gradcheck;
    let spec = CorpusSpec {
        num_records: gc.records,
        attributes: gc.attributes,
        values: gc.values,
        closed_ended_fraction: 0.5,
        noise_std: cfg.corpus.noise_std,
        seed: cfg.stage_seed(Stage::Gradcheck),
    };
    let corpus = make_corpus(&spec, &gc.model)?;
    let v = gc.model.vocab_size;
    corpus
        .into_iter()
        .map(|e| {
            let content = e.chosen.len() - 1;
            let mut rejected: Vec<Vec<TokenId>> = Vec::with_capacity(REJECTED);
            let mut edits = 1;
            while rejected.len() < REJECTED {
                let mut y = e.chosen.clone();
                for _ in 0..edits.min(content) {
                    let pos = rng.random_range(0..content);
                    y[pos] = rng.random_range(FIRST_CONTENT as usize..v) as TokenId;
                }
                if y != e.chosen && !rejected.contains(&y) {
                    rejected.push(y);
                    edits += 1;
                }
            }
            let rejected = rejected
                .into_iter()
                .enumerate()
                .map(|(i, y)| {
                    Ok(RankedCandidate {
                        similarity: similarity(&e.chosen, &y)?,
                        tokens: y,
                        rank: i + 1,
                    })
                })
                .collect::<hscr_core::Result<_>>()?;
            Ok(PreferenceRecord {
                id: e.id,
                rejected,
                visual: e.visual,
                prompt: e.prompt,
                chosen: e.chosen,
            })
        })
        .collect()
}

pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckRun> {
    let gc = &cfg.gradcheck;
    let count = gc.model.param_count();
    if count > gc.max_params {
        return Err(HarnessError::Validation(format!(
            "gradcheck model has {count} parameters, limit is {}",
            gc.max_params
        )));
    }
    let seed = cfg.stage_seed(Stage::Gradcheck);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = ModelParams::init(gc.model.clone(), seed)?;
    let jitter = Normal::new(0.0, REFERENCE_JITTER).expect("finite std");
    let mut reference = policy.clone();
    for t in reference.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x += jitter.sample(&mut rng));
    }
    let recs = records(cfg, &mut rng)?;
    let refs: Vec<RefLogprobs> = recs
        .iter()
        .map(|r| RefLogprobs::compute(&reference, r))
        .collect::<hscr_core::Result<_>>()?;
    let params: Vec<Tensor> = policy.to_tensors();
    let gamma = cfg.train.gamma;

    let mut modes = Vec::new();
    for mode in LossMode::ALL {
        let started = Instant::now();
        let loss = |g: &mut Graph, vars: &[Var]| -> hscr_core::Result<Var> {
            let pv = ParamVars::from_vars(vars)?;
            let dec = Decoder::new(&gc.model, &pv);
            let mut per = Vec::with_capacity(recs.len());
            for (r, rf) in recs.iter().zip(&refs) {
                per.push(record_loss_graph(g, &dec, r, rf, gamma, mode)?.0);
            }
            let sum = g.add_all(&per)?;
            Ok(g.scale(sum, 1.0 / recs.len() as f64))
        };
        let value = {
            let mut g = Graph::new();
            let vars: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
            let root = loss(&mut g, &vars)?;
            g.value(root).item()?
        };
        let report = finite_diff_check(loss, &params, gc.step, gc.tolerance)?;
        modes.push(ModeCheck {
            loss_mode: mode,
            loss: value,
            seconds: started.elapsed().as_secs_f64(),
            report,
        });
    }
    let max_relative_error = modes
        .iter()
        .map(|m| m.report.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradcheckRun {
        parameters: count,
        records: recs.len(),
        step: gc.step,
        tolerance: gc.tolerance,
        gamma,
        passed: modes.iter().all(|m| m.report.passed),
        modes,
        max_relative_error,
    })
}
