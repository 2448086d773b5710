//! Pipeline stages shared by the CLI, the ablation runner and the tests.

use rayon::prelude::*;

use hscr_core::mlpo::{train, PreferenceRecord, TrainConfig, TrainOutcome};
use hscr_core::prefgen::{generation_run, GenerationConfig, GenerationInput};
use hscr_core::rerank::rerank_and_select;
use hscr_core::vlm::{sft_train, ModelConfig, ModelParams, ReferenceModel, SftExample, SftOutcome};

use crate::config::{ExperimentConfig, Stage};
use crate::corpus::{make_corpus, CorpusEntry};
use crate::dataset::{CandidateLine, DatasetMeta, PreferenceLine, PIPELINE_VERSION};
use crate::error::Result;

pub struct Corpora {
    pub train: Vec<CorpusEntry>,
    pub eval: Vec<CorpusEntry>,
}

pub fn build_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    Ok(Corpora {
        train: make_corpus(&cfg.corpus_spec(Stage::TrainCorpus), &cfg.model)?,
        eval: make_corpus(&cfg.corpus_spec(Stage::EvalCorpus), &cfg.model)?,
    })
}

pub fn sft_examples(entries: &[CorpusEntry]) -> Vec<SftExample> {
    entries
        .iter()
        .map(|e| SftExample {
            visual: e.visual.clone(),
            prompt: e.prompt.clone(),
            response: e.chosen.clone(),
        })
        .collect()
}

pub fn run_sft(cfg: &ExperimentConfig, train: &[CorpusEntry]) -> Result<SftOutcome> {
    let sft = cfg.sft_config();
    let init = ModelParams::init(cfg.model.clone(), sft.init_seed)?;
    Ok(sft_train(init, &sft_examples(train), &sft)?)
}

pub fn dataset_meta(cfg: &ExperimentConfig, gen: &GenerationConfig) -> DatasetMeta {
    DatasetMeta {
        beta: gen.beta,
        mask_strategy: gen.mask_strategy,
        mask_ratio: gen.mask_ratio,
        n: gen.n,
        k: gen.k,
        schedule: gen.schedule,
        seed: gen.seed,
        noise_std: cfg.corpus.noise_std,
        attributes: cfg.corpus.attributes,
        values: cfg.corpus.values,
        pipeline_version: PIPELINE_VERSION.into(),
    }
}

pub struct Generated {
    pub lines: Vec<CandidateLine>,
    pub failures: Vec<(u64, String)>,
}

pub fn generate(
    cfg: &ExperimentConfig,
    gen: &GenerationConfig,
    reference: &ReferenceModel,
    entries: &[CorpusEntry],
) -> Result<Generated> {
    let inputs: Vec<GenerationInput> = entries
        .iter()
        .map(|e| GenerationInput {
            id: e.id,
            visual: e.visual.clone(),
            prompt: e.prompt.clone(),
            chosen: e.chosen.clone(),
        })
        .collect();
    let out = generation_run(reference, &inputs, gen)?;
    let meta = dataset_meta(cfg, gen);
    let by_id: std::collections::HashMap<u64, &CorpusEntry> =
        entries.iter().map(|e| (e.id, e)).collect();
    let lines = out
        .records
        .into_iter()
        .map(|r| {
            let e = by_id[&r.id];
            CandidateLine {
                id: r.id,
                scene: e.scene.clone(),
                visual_seed: e.visual_seed,
                prompt_tokens: r.prompt,
                chosen_tokens: r.chosen,
                candidates: r.candidates,
                sensitive: r.sensitive,
                delta: r.delta,
                seed: r.seed,
                meta: meta.clone(),
            }
        })
        .collect();
    Ok(Generated {
        lines,
        failures: out.failures,
    })
}

pub struct Reranked {
    pub lines: Vec<PreferenceLine>,
    /// Records left with fewer than two rejected responses.
    pub dropped: Vec<u64>,
}

pub fn rerank_lines(cfg: &ExperimentConfig, candidates: &[CandidateLine]) -> Result<Reranked> {
    let ranked: Vec<_> = candidates
        .par_iter()
        .map(|c| {
            rerank_and_select(
                &c.chosen_tokens,
                &c.candidates,
                cfg.rerank.j,
                cfg.rerank.gap,
            )
        })
        .collect::<hscr_core::Result<_>>()?;
    let mut lines = Vec::new();
    let mut dropped = Vec::new();
    for (c, rejected) in candidates.iter().zip(ranked) {
        if rejected.len() < 2 {
            dropped.push(c.id);
            continue;
        }
        lines.push(PreferenceLine {
            id: c.id,
            scene: c.scene.clone(),
            visual_seed: c.visual_seed,
            prompt_tokens: c.prompt_tokens.clone(),
            chosen_tokens: c.chosen_tokens.clone(),
            rejected,
            meta: c.meta.clone(),
        });
    }
    Ok(Reranked { lines, dropped })
}

pub fn to_records(lines: &[PreferenceLine], model: &ModelConfig) -> Result<Vec<PreferenceRecord>> {
    lines.par_iter().map(|l| l.to_record(model)).collect()
}

/// Trains a copy of the reference on `data`, monitoring `monitor`.
pub fn run_training(
    reference: &ReferenceModel,
    data: &[PreferenceRecord],
    monitor: Option<&[PreferenceRecord]>,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    Ok(train(reference.thaw_copy(), reference, data, tc, monitor)?)
}

/// Mean `|delta_t|` over every position of every record.
pub fn mean_abs_delta(lines: &[CandidateLine]) -> f64 {
    let (sum, n) = lines
        .iter()
        .flat_map(|l| l.delta.iter())
        .fold((0.0, 0usize), |(s, n), d| (s + d.abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
