use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hscr_core::mlpo::{LossMode, TrainConfig};
use hscr_core::prefgen::{record_seed, GenerationConfig, VariantSchedule};
use hscr_core::vlm::{MaskStrategy, ModelConfig, SftConfig};

use crate::corpus::CorpusSpec;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub train_records: usize,
    pub eval_records: usize,
    pub attributes: usize,
    pub values: usize,
    pub closed_ended_fraction: f64,
    pub noise_std: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            train_records: 2000,
            eval_records: 400,
            attributes: 4,
            values: 8,
            closed_ended_fraction: 0.5,
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 80,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub k: usize,
    pub beta: f64,
    pub n: usize,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub schedule: VariantSchedule,
    pub sampled: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            k: g.k,
            beta: g.beta,
            n: g.n,
            mask_strategy: g.mask_strategy,
            mask_ratio: g.mask_ratio,
            schedule: g.schedule,
            sampled: g.sampled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSection {
    pub j: usize,
    pub gap: f64,
}

impl Default for RerankSection {
    fn default() -> Self {
        Self { j: 3, gap: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            gamma: t.gamma,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss_mode: t.loss_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub model: ModelConfig,
    pub attributes: usize,
    pub values: usize,
    pub records: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_params: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 24,
                d_model: 8,
                visual_tokens: 4,
                visual_dim: 4,
                ff_dim: 16,
                max_text_len: 12,
                visual_regions: 2,
                encoder_locality: 2.0,
            },
            attributes: 2,
            values: 4,
            records: 2,
            step: 1e-5,
            tolerance: 1e-4,
            max_params: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub mask_strategies: Vec<MaskStrategy>,
    pub mask_ratios: Vec<f64>,
    pub loss_modes: Vec<LossMode>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            mask_strategies: MaskStrategy::ALL.to_vec(),
            mask_ratios: vec![0.3, 0.5, 0.7, 0.9],
            loss_modes: vec![
                LossMode::ExplicitOnly,
                LossMode::ImplicitOnly,
                LossMode::Hscr,
                LossMode::Dpo,
            ],
        }
    }
}

/// Everything a pipeline run depends on. Stage seeds are derived from
/// `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub sft: SftSection,
    pub generation: GenerationSection,
    pub rerank: RerankSection,
    pub train: TrainSection,
    pub gradcheck: GradcheckSection,
    pub ablation: AblationSection,
}

/// Seed streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainCorpus = 1,
    EvalCorpus = 2,
    SftInit = 3,
    SftShuffle = 4,
    Generation = 5,
    Training = 6,
    Gradcheck = 7,
    External = 8,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let v = |r: hscr_core::Result<()>| r.map_err(|e| HarnessError::Validation(e.to_string()));
        v(self.model.validate())?;
        self.corpus_spec(Stage::TrainCorpus).validate(&self.model)?;
        if self.corpus.eval_records == 0 {
            return Err(HarnessError::Validation(
                "eval_records must be positive".into(),
            ));
        }
        v(self.generation_config().validate())?;
        if self.generation.n == 0 {
            return Err(HarnessError::Validation("n must be positive".into()));
        }
        if self.rerank.j < 2 || self.rerank.gap.is_nan() || self.rerank.gap < 0.0 {
            return Err(HarnessError::Validation(
                "rerank needs j >= 2 and gap >= 0".into(),
            ));
        }
        if self.rerank.j > self.generation.k {
            return Err(HarnessError::Validation(format!(
                "j = {} exceeds k = {}",
                self.rerank.j, self.generation.k
            )));
        }
        v(self.train_config().validate())?;
        if self.sft.epochs == 0
            || self.sft.batch_size == 0
            || self.sft.learning_rate.is_nan()
            || self.sft.learning_rate <= 0.0
        {
            return Err(HarnessError::Validation("invalid sft section".into()));
        }
        v(self.gradcheck.model.validate())?;
        if self.ablation.seeds.is_empty() {
            return Err(HarnessError::Validation(
                "ablation needs at least one seed".into(),
            ));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        record_seed(self.seed, stage as u64)
    }

    pub fn corpus_spec(&self, stage: Stage) -> CorpusSpec {
        let c = &self.corpus;
        CorpusSpec {
            num_records: match stage {
                Stage::EvalCorpus => c.eval_records,
                _ => c.train_records,
            },
            attributes: c.attributes,
            values: c.values,
            closed_ended_fraction: c.closed_ended_fraction,
            noise_std: c.noise_std,
            seed: self.stage_seed(stage),
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            learning_rate: self.sft.learning_rate,
            epochs: self.sft.epochs,
            batch_size: self.sft.batch_size,
            init_seed: self.stage_seed(Stage::SftInit),
            shuffle_seed: self.stage_seed(Stage::SftShuffle),
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.generation;
        GenerationConfig {
            k: g.k,
            beta: g.beta,
            n: g.n,
            mask_strategy: g.mask_strategy,
            mask_ratio: g.mask_ratio,
            schedule: g.schedule,
            sampled: g.sampled,
            seed: self.stage_seed(Stage::Generation),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            gamma: t.gamma,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.stage_seed(Stage::Training),
            loss_mode: t.loss_mode,
            max_steps: None,
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
