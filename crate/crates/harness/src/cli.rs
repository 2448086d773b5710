//! The `hscr` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use hscr_core::mlpo::{margin_report, LossMode, MarginReport, TrainingReport};
use hscr_core::vlm::{ModelParams, ReferenceModel, CHECKPOINT_FORMAT_VERSION};

use crate::ablation::{render_table, run_ablation, AblationKind};
use crate::config::{ExperimentConfig, Stage};
use crate::dataset::{
    atomic_write, read_candidates, read_preferences, write_json, write_jsonl, PIPELINE_VERSION,
};
use crate::error::{HarnessError, Result};
use crate::eval::{eval_accuracy, EvalMetrics};
use crate::gradcheck::run_gradcheck;
use crate::pipeline::{build_corpora, generate, rerank_lines, run_sft, run_training, to_records};
use crate::sampling::{sampling_probability_report, scrambled_external};

pub const SFT_MODEL: &str = "sft_model.json";
pub const SFT_REPORT: &str = "sft_report.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const CANDIDATES_HELDOUT: &str = "candidates_heldout.jsonl";
pub const PREFERENCES: &str = "preferences.jsonl";
pub const PREFERENCES_HELDOUT: &str = "preferences_heldout.jsonl";
pub const RERANK_REPORT: &str = "rerank_report.json";
pub const POLICY: &str = "policy.json";
pub const TRAINING_REPORT: &str = "training_report.json";
pub const EVAL: &str = "eval.json";
pub const SAMPLING_REPORT: &str = "sampling_report.json";
pub const GRADCHECK: &str = "gradcheck.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "hscr",
    version,
    about = "Self-contrastive preference data and multi-level preference training on a toy vision-language model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the reference model on the synthetic corpus.
    Sft {
        #[command(flatten)]
        common: Common,
    },
    /// Build dispreferred candidates with the reference model.
    GeneratePrefs {
        #[command(flatten)]
        common: Common,
        /// Reference checkpoint [default: <out>/sft_model.json].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rank candidates by similarity and keep well-separated ones.
    Rerank {
        #[command(flatten)]
        common: Common,
    },
    /// Preference-train a policy initialised from the reference.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        loss_mode: Option<LossMode>,
        /// Reference checkpoint [default: <out>/sft_model.json].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score [default: <out>/policy.json].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-token probability of the rejected responses under the reference.
    ReportSampling {
        #[command(flatten)]
        common: Common,
        /// Reference checkpoint [default: <out>/sft_model.json].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run one ablation study end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: AblationKind,
    },
    /// Finite-difference check of every loss on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Sft { common }
            | Self::GeneratePrefs { common, .. }
            | Self::Rerank { common }
            | Self::Train { common, .. }
            | Self::Eval { common, .. }
            | Self::ReportSampling { common, .. }
            | Self::Ablate { common, .. }
            | Self::Gradcheck { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Sft { .. } => "sft",
            Self::GeneratePrefs { .. } => "generate-prefs",
            Self::Rerank { .. } => "rerank",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::ReportSampling { .. } => "report-sampling",
            Self::Ablate { .. } => "ablate",
            Self::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("hscr {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn input_path(out: &Path, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(default))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(HarnessError::Validation(format!(
            "missing input {}",
            path.display()
        )))
    }
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<ModelParams> {
    require(path)?;
    let m = ModelParams::load(path)
        .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
    if m.config != cfg.model {
        return Err(HarnessError::Validation(format!(
            "{} was trained with a different model config",
            path.display()
        )));
    }
    Ok(m)
}

fn save_model(path: &Path, m: &ModelParams) -> Result<()> {
    atomic_write(path, m.to_json()?.as_bytes())
}

/// Adds this command's entry to `<out>/manifest.json`.
fn update_manifest(
    out: &Path,
    command: &str,
    argv: &[OsString],
    cfg: &ExperimentConfig,
    outputs: &[&str],
) -> Result<()> {
    let path = out.join(MANIFEST);
    let mut manifest: Value = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    let entry = json!({
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "config": cfg,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "outputs": outputs,
        "versions": {
            "hscr": env!("CARGO_PKG_VERSION"),
            "pipeline": PIPELINE_VERSION,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
        },
    });
    if !manifest.is_object() {
        manifest = json!({});
    }
    manifest
        .as_object_mut()
        .expect("object")
        .entry("commands")
        .or_insert_with(|| json!({}))
        .as_object_mut()
        .ok_or_else(|| HarnessError::Validation(format!("{} is malformed", path.display())))?
        .insert(command.into(), entry);
    write_json(&path, &manifest)
}

#[derive(Serialize)]
struct SftReport<'a> {
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    train_records: usize,
    loss_curve: &'a [f64],
    epoch_losses: &'a [f64],
    train_metrics: EvalMetrics,
    eval_metrics: EvalMetrics,
    wall_time_seconds: f64,
}

#[derive(Serialize)]
struct GenerationReport {
    records: usize,
    heldout_records: usize,
    failures: Vec<(u64, String)>,
    heldout_failures: Vec<(u64, String)>,
}

#[derive(Serialize)]
struct RerankReport {
    j: usize,
    gap: f64,
    kept: usize,
    dropped: Vec<u64>,
    heldout_kept: usize,
    heldout_dropped: Vec<u64>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    report: &'a TrainingReport,
    heldout_records: usize,
    initial: MarginSummary,
    final_margins: MarginSummary,
}

#[derive(Serialize)]
struct MarginSummary {
    logprob_margin_mean: f64,
    logprob_margin_median: f64,
    reward_margin_mean: f64,
    reward_margin_median: f64,
    reward_tail_mean: f64,
    rank_order_fraction: f64,
}

impl From<&MarginReport> for MarginSummary {
    fn from(m: &MarginReport) -> Self {
        Self {
            logprob_margin_mean: m.logprob_margin_mean,
            logprob_margin_median: m.logprob_margin_median,
            reward_margin_mean: m.reward_margin_mean,
            reward_margin_median: m.reward_margin_median,
            reward_tail_mean: m.reward_tail_mean,
            rank_order_fraction: m.reward_order_fraction,
        }
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))
}

fn execute(cmd: &Command, argv: &[OsString]) -> Result<()> {
    let common = cmd.common();
    let mut cfg = load_config(common)?;
    let out = common.out.as_path();
    let outputs: Vec<String> = match cmd {
        Command::Sft { .. } => {
            let corpora = build_corpora(&cfg)?;
            create_out(out)?;
            let started = Instant::now();
            let sft = run_sft(&cfg, &corpora.train)?;
            let wall = started.elapsed().as_secs_f64();
            let sc = cfg.sft_config();
            let report = SftReport {
                learning_rate: sc.learning_rate,
                epochs: sc.epochs,
                batch_size: sc.batch_size,
                train_records: corpora.train.len(),
                loss_curve: &sft.loss_curve,
                epoch_losses: &sft.epoch_losses,
                train_metrics: eval_accuracy(&sft.model, &corpora.train)?,
                eval_metrics: eval_accuracy(&sft.model, &corpora.eval)?,
                wall_time_seconds: wall,
            };
            save_model(&out.join(SFT_MODEL), &sft.model)?;
            write_json(&out.join(SFT_REPORT), &report)?;
            vec![SFT_MODEL.into(), SFT_REPORT.into()]
        }
        Command::GeneratePrefs { model, .. } => {
            let reference =
                ReferenceModel::freeze(load_model(&input_path(out, model, SFT_MODEL), &cfg)?);
            let corpora = build_corpora(&cfg)?;
            let gen = cfg.generation_config();
            let train = generate(&cfg, &gen, &reference, &corpora.train)?;
            let held = generate(&cfg, &gen, &reference, &corpora.eval)?;
            create_out(out)?;
            write_jsonl(&out.join(CANDIDATES), &train.lines)?;
            write_jsonl(&out.join(CANDIDATES_HELDOUT), &held.lines)?;
            write_json(
                &out.join("generation_report.json"),
                &GenerationReport {
                    records: train.lines.len(),
                    heldout_records: held.lines.len(),
                    failures: train.failures,
                    heldout_failures: held.failures,
                },
            )?;
            vec![
                CANDIDATES.into(),
                CANDIDATES_HELDOUT.into(),
                "generation_report.json".into(),
            ]
        }
        Command::Rerank { .. } => {
            let (p, ph) = (out.join(CANDIDATES), out.join(CANDIDATES_HELDOUT));
            require(&p)?;
            require(&ph)?;
            let train = rerank_lines(&cfg, &read_candidates(&p, &cfg.model)?)?;
            let held = rerank_lines(&cfg, &read_candidates(&ph, &cfg.model)?)?;
            create_out(out)?;
            write_jsonl(&out.join(PREFERENCES), &train.lines)?;
            write_jsonl(&out.join(PREFERENCES_HELDOUT), &held.lines)?;
            write_json(
                &out.join(RERANK_REPORT),
                &RerankReport {
                    j: cfg.rerank.j,
                    gap: cfg.rerank.gap,
                    kept: train.lines.len(),
                    dropped: train.dropped,
                    heldout_kept: held.lines.len(),
                    heldout_dropped: held.dropped,
                },
            )?;
            vec![
                PREFERENCES.into(),
                PREFERENCES_HELDOUT.into(),
                RERANK_REPORT.into(),
            ]
        }
        Command::Train {
            loss_mode, model, ..
        } => {
            if let Some(m) = loss_mode {
                cfg.train.loss_mode = *m;
                cfg.validate()?;
            }
            let reference =
                ReferenceModel::freeze(load_model(&input_path(out, model, SFT_MODEL), &cfg)?);
            let (p, ph) = (out.join(PREFERENCES), out.join(PREFERENCES_HELDOUT));
            require(&p)?;
            require(&ph)?;
            let data = to_records(&read_preferences(&p, &cfg.model)?, &cfg.model)?;
            let held = to_records(&read_preferences(&ph, &cfg.model)?, &cfg.model)?;
            let tc = cfg.train_config();
            let initial = margin_report(&reference, &reference, &held, tc.gamma)?;
            let outcome = run_training(&reference, &data, Some(&held), &tc)?;
            let fin = margin_report(&outcome.policy, &reference, &held, tc.gamma)?;
            create_out(out)?;
            save_model(&out.join(POLICY), &outcome.policy)?;
            write_json(
                &out.join(TRAINING_REPORT),
                &TrainSummary {
                    report: &outcome.report,
                    heldout_records: held.len(),
                    initial: (&initial).into(),
                    final_margins: (&fin).into(),
                },
            )?;
            vec![POLICY.into(), TRAINING_REPORT.into()]
        }
        Command::Eval { model, .. } => {
            let path = input_path(out, model, POLICY);
            let policy = load_model(&path, &cfg)?;
            let corpora = build_corpora(&cfg)?;
            let metrics = eval_accuracy(&policy, &corpora.eval)?;
            create_out(out)?;
            write_json(
                &out.join(EVAL),
                &json!({ "model": path.display().to_string(), "metrics": metrics }),
            )?;
            vec![EVAL.into()]
        }
        Command::ReportSampling { model, .. } => {
            let reference =
                ReferenceModel::freeze(load_model(&input_path(out, model, SFT_MODEL), &cfg)?);
            let p = out.join(PREFERENCES);
            require(&p)?;
            let data = to_records(&read_preferences(&p, &cfg.model)?, &cfg.model)?;
            let external =
                scrambled_external(&data, cfg.model.vocab_size, cfg.stage_seed(Stage::External));
            let report = sampling_probability_report(&reference, &data, Some(&external))?;
            create_out(out)?;
            write_json(&out.join(SAMPLING_REPORT), &report)?;
            vec![SAMPLING_REPORT.into()]
        }
        Command::Ablate { kind, .. } => {
            create_out(out)?;
            let report = run_ablation(&cfg, *kind)?;
            let json_name = format!("ablation_{}.json", kind.name());
            let txt_name = format!("ablation_{}.txt", kind.name());
            write_json(&out.join(&json_name), &report)?;
            atomic_write(&out.join(&txt_name), render_table(&report).as_bytes())?;
            vec![json_name, txt_name]
        }
        Command::Gradcheck { .. } => {
            let report = run_gradcheck(&cfg)?;
            create_out(out)?;
            write_json(&out.join(GRADCHECK), &report)?;
            update_manifest(out, cmd.name(), argv, &cfg, &[GRADCHECK])?;
            if !report.passed {
                return Err(HarnessError::Core(hscr_core::Error::Contract(format!(
                    "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
                    report.max_relative_error, report.tolerance
                ))));
            }
            return Ok(());
        }
    };
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    update_manifest(out, cmd.name(), argv, &cfg, &names)
}
