//! JSONL dataset files: raw candidates from generation and ranked
//! preferences after re-ranking. One self-contained record per line.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hscr_core::mlpo::PreferenceRecord;
use hscr_core::prefgen::VariantSchedule;
use hscr_core::rerank::RankedCandidate;
use hscr_core::vlm::{MaskStrategy, ModelConfig, Scene, SceneLayout, TokenId, VisualInput};

use crate::error::{HarnessError, Result};

pub const PIPELINE_VERSION: &str = concat!("hscr-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub beta: f64,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub n: usize,
    pub k: usize,
    pub schedule: VariantSchedule,
    pub seed: u64,
    pub noise_std: f64,
    pub attributes: usize,
    pub values: usize,
    pub pipeline_version: String,
}

impl DatasetMeta {
    pub fn layout(&self) -> SceneLayout {
        SceneLayout {
            attributes: self.attributes,
            values: self.values,
        }
    }
}

/// A generated record before re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLine {
    pub id: u64,
    pub scene: Scene,
    pub visual_seed: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub chosen_tokens: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    pub sensitive: Vec<usize>,
    pub delta: Vec<f64>,
    pub seed: u64,
    pub meta: DatasetMeta,
}

/// A ranked preference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceLine {
    pub id: u64,
    pub scene: Scene,
    pub visual_seed: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub chosen_tokens: Vec<TokenId>,
    pub rejected: Vec<RankedCandidate>,
    pub meta: DatasetMeta,
}

impl PreferenceLine {
    pub fn render(&self, model: &ModelConfig) -> Result<VisualInput> {
        Ok(VisualInput::render(
            &self.scene,
            self.meta.layout(),
            model,
            self.meta.noise_std,
            self.visual_seed,
        )?)
    }

    pub fn to_record(&self, model: &ModelConfig) -> Result<PreferenceRecord> {
        Ok(PreferenceRecord {
            id: self.id,
            visual: self.render(model)?,
            prompt: self.prompt_tokens.clone(),
            chosen: self.chosen_tokens.clone(),
            rejected: self.rejected.clone(),
        })
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| HarnessError::Validation(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        HarnessError::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    atomic_write(path, to_jsonl(items)?.as_bytes())
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| HarnessError::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    if out.is_empty() {
        return Err(HarnessError::Dataset {
            path: path.to_path_buf(),
            line: 0,
            message: "no records".into(),
        });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

struct Checker<'a> {
    path: &'a Path,
    model: &'a ModelConfig,
}

impl Checker<'_> {
    fn fail(&self, line: usize, message: impl Into<String>) -> HarnessError {
        HarnessError::Dataset {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn tokens(&self, line: usize, what: &str, prompt: usize, s: &[TokenId]) -> Result<()> {
        if let Some(t) = s.iter().find(|&&t| t as usize >= self.model.vocab_size) {
            return Err(self.fail(line, format!("{what}: token {t} outside vocabulary")));
        }
        if prompt + s.len() > self.model.max_text_len {
            return Err(self.fail(line, format!("{what}: sequence longer than T_max")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn common(
        &self,
        line: usize,
        prev: Option<u64>,
        id: u64,
        first_meta: &DatasetMeta,
        meta: &DatasetMeta,
        scene: &Scene,
        prompt: &[TokenId],
        chosen: &[TokenId],
    ) -> Result<()> {
        if prev.is_some_and(|p| id <= p) {
            return Err(self.fail(line, format!("id {id} is not increasing")));
        }
        if meta != first_meta {
            return Err(self.fail(line, "meta differs from the first record"));
        }
        scene
            .validate(meta.layout())
            .map_err(|e| self.fail(line, e.to_string()))?;
        if prompt.is_empty() || chosen.is_empty() {
            return Err(self.fail(line, "empty prompt or chosen response"));
        }
        self.tokens(line, "prompt", 0, prompt)?;
        self.tokens(line, "chosen", prompt.len(), chosen)
    }
}

pub fn read_candidates(path: &Path, model: &ModelConfig) -> Result<Vec<CandidateLine>> {
    let items: Vec<(usize, CandidateLine)> = parse_jsonl(path, &read_text(path)?)?;
    let ck = Checker { path, model };
    let first = items[0].1.meta.clone();
    let mut prev = None;
    for (line, r) in &items {
        ck.common(
            *line,
            prev,
            r.id,
            &first,
            &r.meta,
            &r.scene,
            &r.prompt_tokens,
            &r.chosen_tokens,
        )?;
        for c in &r.candidates {
            ck.tokens(*line, "candidate", r.prompt_tokens.len(), c)?;
            if c.is_empty() {
                return Err(ck.fail(*line, "empty candidate"));
            }
        }
        if r.delta.len() != r.chosen_tokens.len() {
            return Err(ck.fail(*line, "delta length differs from chosen length"));
        }
        prev = Some(r.id);
    }
    Ok(items.into_iter().map(|(_, r)| r).collect())
}

pub fn read_preferences(path: &Path, model: &ModelConfig) -> Result<Vec<PreferenceLine>> {
    let items: Vec<(usize, PreferenceLine)> = parse_jsonl(path, &read_text(path)?)?;
    let ck = Checker { path, model };
    let first = items[0].1.meta.clone();
    let mut prev = None;
    for (line, r) in &items {
        ck.common(
            *line,
            prev,
            r.id,
            &first,
            &r.meta,
            &r.scene,
            &r.prompt_tokens,
            &r.chosen_tokens,
        )?;
        if r.rejected.is_empty() {
            return Err(ck.fail(*line, "no rejected responses"));
        }
        for (i, c) in r.rejected.iter().enumerate() {
            ck.tokens(*line, "rejected", r.prompt_tokens.len(), &c.tokens)?;
            if c.tokens.is_empty() {
                return Err(ck.fail(*line, "empty rejected response"));
            }
            if c.rank != i + 1 {
                return Err(ck.fail(*line, format!("rank {} at position {}", c.rank, i + 1)));
            }
            if !(0.0..=1.0).contains(&c.similarity) {
                return Err(ck.fail(*line, format!("similarity {} outside [0, 1]", c.similarity)));
            }
            if i > 0 && c.similarity >= r.rejected[i - 1].similarity {
                return Err(ck.fail(*line, "similarities are not strictly decreasing"));
            }
            if r.rejected[..i].iter().any(|o| o.tokens == c.tokens) {
                return Err(ck.fail(*line, "duplicate rejected response"));
            }
        }
        prev = Some(r.id);
    }
    Ok(items.into_iter().map(|(_, r)| r).collect())
}
