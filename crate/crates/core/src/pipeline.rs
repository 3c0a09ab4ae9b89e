//! Command orchestration: train / eval / i2i-eval / attack / report.
//!
//! Every command takes a validated [`RunConfig`] and an output directory,
//! derives all randomness from the top-level seed (mixed with each
//! section's own seed salt), and writes self-describing artifacts: records
//! and reports embed the config hash, image references are relative paths
//! or content hashes, so a rerun with identical config and seed is
//! byte-identical.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    attack_outcome, summarize_defense, AttackConfig, AttackError, AttackOutcome, DefenseEval,
};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::image::{Image, ImageError};
use crate::metrics::{
    build_report, frechet_distance, read_records, write_records, ImageEvalRecord, ImageFlagger,
    MetricReport, MetricsError, ReportConfig,
};
use crate::plugins::{build_plugins, PluginError, PluginSet};
use crate::policy::{decode, DenoisingPolicy, PolicyError, PromptTag};
use crate::prompts::{load_prompts, PromptError};
use crate::reward::{ClassWeightTable, RewardEngine, RewardError};
use crate::seeding::mix_seed;
use crate::synthetic::{default_attack_vocabulary, pretrained_policy, ToyTarget};
use crate::trainer::{TrainError, TrainStats, Trainer};

const TRAIN_SALT: u64 = 0x7124;
const EVAL_SALT: u64 = 0xE7A1;
const I2I_SALT: u64 = 0x1221;
const ATTACK_SALT: u64 = 0xA77A;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o failure on {path}: {message}")]
    Io { path: String, message: String },
    #[error("checkpoint policy config differs from [policy] section; regenerate or fix the config")]
    CheckpointConfigMismatch,
    #[error("input directory {0} has no readable images")]
    NoInputs(String),
}

fn io_err<'a>(path: &'a Path) -> impl Fn(std::io::Error) -> PipelineError + 'a {
    move |e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Serial map for `workers <= 1`, order-preserving parallel map otherwise.
/// Results are identical either way because every job derives its own seed
/// from its index.
fn map_jobs<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if workers <= 1 {
        items.into_iter().map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| items.into_par_iter().map(f).collect())
    }
}

fn weight_table(cfg: &RunConfig, plugins: &PluginSet) -> Result<ClassWeightTable, PipelineError> {
    match &cfg.reward.class_weights_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            Ok(ClassWeightTable::from_json(&text)?)
        }
        None => Ok(ClassWeightTable::uniform_unsafe(
            plugins.detector.classes(),
        )?),
    }
}

fn reward_engine(cfg: &RunConfig, plugins: &PluginSet) -> Result<RewardEngine, PipelineError> {
    let table = weight_table(cfg, plugins)?;
    let engine = RewardEngine::new(
        cfg.reward.lambda_align,
        cfg.reward.lambda_nudity,
        table,
        plugins.detector.clone(),
        plugins.aligner.clone(),
    )?;
    if cfg.reward.face_terms.is_empty() {
        Ok(engine)
    } else {
        Ok(engine.with_face_terms(cfg.reward.face_terms.clone(), plugins.face_analyzer.clone())?)
    }
}

/// The base (untrained) policy of the run.
pub fn base_policy(cfg: &RunConfig) -> DenoisingPolicy {
    pretrained_policy(&cfg.policy, &cfg.synthetic)
}

fn policy_from_checkpoint(
    cfg: &RunConfig,
    path: Option<&PathBuf>,
) -> Result<DenoisingPolicy, PipelineError> {
    match path {
        None => Ok(base_policy(cfg)),
        Some(p) => {
            let (policy, _) = checkpoint::load_policy(p)?;
            if policy.config() != &cfg.policy {
                return Err(PipelineError::CheckpointConfigMismatch);
            }
            Ok(policy)
        }
    }
}

// ----------------------------------------------------------------------
// train
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub stats_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub stats: Vec<TrainStats>,
}

/// Wires policy + LoRA + reward + trainer, writes periodic checkpoints and
/// an append-only stats log. Resumable from a trainer checkpoint.
pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts, PipelineError> {
    cfg.validate()?;
    let config_hash = cfg.config_hash();
    let plugins = build_plugins(cfg)?;
    let engine = reward_engine(cfg, &plugins)?;

    let prompts_path = cfg.trainer.prompts.as_ref().ok_or(ConfigError::Invalid(
        "trainer.prompts is required for train".into(),
    ))?;
    let pool =
        load_prompts(prompts_path, &cfg.trainer.prompt_format()?)?.contexts(&plugins.embedder);

    let mut params = cfg.trainer.params();
    params.seed = mix_seed(cfg.seed, mix_seed(TRAIN_SALT, params.seed));

    let resuming = cfg.trainer.resume_from.is_some();
    let mut trainer = match &cfg.trainer.resume_from {
        Some(path) => {
            let (policy, adam, round, _) = checkpoint::load_trainer_state(path)?;
            if policy.config() != &cfg.policy {
                return Err(PipelineError::CheckpointConfigMismatch);
            }
            Trainer::resume(policy, engine, pool, params, adam, round)?
        }
        None => {
            let mut policy = base_policy(cfg);
            if cfg.lora.enabled {
                policy.enable_lora(cfg.lora.rank, cfg.lora.alpha, cfg.lora.init_seed)?;
            }
            Trainer::new(policy, engine, pool, params)?
        }
    };

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let stats_path = out_dir.join("stats.jsonl");
    let mut stats_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&stats_path)
        .map_err(io_err(&stats_path))?;

    let mut checkpoints = Vec::new();
    let mut stats = Vec::new();
    while trainer.round() < cfg.trainer.total_rounds {
        let round_stats = trainer.train_round()?;
        writeln!(
            stats_file,
            "{}",
            serde_json::to_string(&round_stats).expect("stats serialize")
        )
        .map_err(io_err(&stats_path))?;
        let done = trainer.round();
        if cfg.trainer.checkpoint_every > 0 && done % cfg.trainer.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("round_{done:04}.ckpt"));
            checkpoint::save_trainer_state(
                &path,
                trainer.policy(),
                trainer.adam(),
                done,
                Some(&config_hash),
            )?;
            checkpoints.push(path);
        }
        stats.push(round_stats);
    }
    let final_checkpoint = ckpt_dir.join("final.ckpt");
    checkpoint::save_trainer_state(
        &final_checkpoint,
        trainer.policy(),
        trainer.adam(),
        trainer.round(),
        Some(&config_hash),
    )?;
    if cfg.io.export_lora_only && trainer.policy().is_lora() {
        checkpoint::save_lora_only(&ckpt_dir.join("final.lora"), trainer.policy())?;
    }
    Ok(TrainArtifacts {
        stats_path,
        final_checkpoint,
        checkpoints,
        stats,
    })
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub records_path: PathBuf,
    pub report_path: PathBuf,
    pub markdown_path: PathBuf,
    pub report: MetricReport,
}

fn load_reference_images(dir: &Path) -> Result<Vec<Image>, PipelineError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        images.push(Image::load_png(&p)?);
    }
    if images.is_empty() {
        return Err(PipelineError::NoInputs(dir.display().to_string()));
    }
    Ok(images)
}

/// Generates `n_per_prompt` images per prompt from a checkpoint, scores
/// them with the detector/aligner/aesthetic plugins, and emits records
/// JSON-lines plus a report (JSON and markdown).
pub fn run_eval(cfg: &RunConfig, out_dir: &Path) -> Result<EvalArtifacts, PipelineError> {
    cfg.validate()?;
    let eval = cfg.eval_section()?.clone();
    let config_hash = cfg.config_hash();
    let plugins = build_plugins(cfg)?;
    let table = weight_table(cfg, &plugins)?;
    let policy = policy_from_checkpoint(cfg, eval.checkpoint.as_ref())?;
    let pool = load_prompts(&eval.prompts, &eval.prompt_format()?)?;
    let contexts = pool.contexts(&plugins.embedder);

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let images_dir = out_dir.join("images");
    if cfg.io.write_images {
        std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    }

    let eval_seed = mix_seed(cfg.seed, EVAL_SALT);
    let jobs: Vec<(usize, usize)> = (0..contexts.len())
        .flat_map(|pi| (0..eval.n_per_prompt).map(move |k| (pi, k)))
        .collect();
    let results: Vec<Result<(ImageEvalRecord, Vec<f64>), PipelineError>> =
        map_jobs(jobs, cfg.workers, |(pi, k)| {
            let ctx = &contexts[pi];
            let seed = mix_seed(eval_seed, (pi * eval.n_per_prompt + k) as u64);
            let traj = policy.sample_trajectory(ctx, seed)?;
            let image = decode(traj.final_state())?;
            let detections = plugins
                .detector
                .detect(&image)
                .map_err(|message| RewardError::Detector {
                    name: plugins.detector.name().to_string(),
                    image_ref: image.content_ref(),
                    message,
                })?;
            let clip = plugins
                .aligner
                .align(&image, &ctx.text)
                .map_err(|message| RewardError::Aligner {
                    name: plugins.aligner.name().to_string(),
                    image_ref: image.content_ref(),
                    prompt: ctx.text.clone(),
                    message,
                })?;
            let image_ref = if cfg.io.write_images {
                let rel = format!("images/{pi:04}_{k:02}.png");
                image.save_png(&out_dir.join(&rel))?;
                rel
            } else {
                image.content_ref()
            };
            let features = plugins.features.features(&image);
            Ok((
                ImageEvalRecord {
                    prompt: ctx.text.clone(),
                    detections,
                    clip_score: Some(clip),
                    aesthetic: Some(plugins.aesthetic.score(&image)),
                    image_ref,
                },
                features,
            ))
        });
    let mut records = Vec::with_capacity(results.len());
    let mut generated_features = Vec::with_capacity(results.len());
    for r in results {
        let (record, features) = r?;
        records.push(record);
        generated_features.push(features);
    }

    let frechet = match &eval.frechet_reference {
        None => None,
        Some(dir) => {
            let reference = load_reference_images(dir)?;
            let ref_features: Vec<Vec<f64>> = reference
                .iter()
                .map(|img| plugins.features.features(img))
                .collect();
            Some(frechet_distance(&generated_features, &ref_features)?)
        }
    };

    let dataset = eval.dataset_name.clone().unwrap_or_else(|| {
        eval.prompts
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "eval".into())
    });
    let report = build_report(
        &records,
        &ReportConfig {
            dataset,
            unsafe_classes: table.unsafe_classes(),
            detection_threshold: eval.detection_threshold,
            frechet,
            config_hash: config_hash.clone(),
        },
    )?;

    let records_path = out_dir.join("records.jsonl");
    write_records(&records_path, &report.records)?;
    let report_path = out_dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )
    .map_err(io_err(&report_path))?;
    let markdown_path = out_dir.join("report.md");
    std::fs::write(&markdown_path, crate::metrics::render_markdown(&[&report]))
        .map_err(io_err(&markdown_path))?;
    Ok(EvalArtifacts {
        records_path,
        report_path,
        markdown_path,
        report,
    })
}

// ----------------------------------------------------------------------
// i2i eval
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedInput {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct I2iSummary {
    pub report: MetricReport,
    pub strength: f64,
    pub outputs_per_input: usize,
    pub n_inputs: usize,
    pub skipped: Vec<SkippedInput>,
}

#[derive(Debug, Clone)]
pub struct I2iArtifacts {
    pub records_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: I2iSummary,
}

/// Image-to-image safety evaluation: for each input image, denoise
/// `outputs_per_input` variants at the configured strength and score them.
/// Unreadable inputs are skipped with a warning recorded in the summary.
pub fn run_i2i_eval(cfg: &RunConfig, out_dir: &Path) -> Result<I2iArtifacts, PipelineError> {
    cfg.validate()?;
    let i2i = cfg.i2i_section()?.clone();
    let config_hash = cfg.config_hash();
    let plugins = build_plugins(cfg)?;
    let table = weight_table(cfg, &plugins)?;
    let policy = policy_from_checkpoint(cfg, i2i.checkpoint.as_ref())?;
    let ctx = plugins.embedder.context(&i2i.prompt, PromptTag::Unknown);

    let mut entries: Vec<PathBuf> = std::fs::read_dir(&i2i.input_dir)
        .map_err(io_err(&i2i.input_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut inputs = Vec::new();
    let mut skipped = Vec::new();
    for path in entries {
        match Image::load_png(&path) {
            Ok(img) => inputs.push((path, img)),
            Err(e) => skipped.push(SkippedInput {
                path: path.display().to_string(),
                error: e.to_string(),
            }),
        }
    }
    if inputs.is_empty() {
        return Err(PipelineError::NoInputs(i2i.input_dir.display().to_string()));
    }

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let i2i_seed = mix_seed(cfg.seed, I2I_SALT);
    let jobs: Vec<(usize, usize)> = (0..inputs.len())
        .flat_map(|ii| (0..i2i.outputs_per_input).map(move |k| (ii, k)))
        .collect();
    let results: Vec<Result<ImageEvalRecord, PipelineError>> =
        map_jobs(jobs, cfg.workers, |(ii, k)| {
            let (path, input) = &inputs[ii];
            let seed = mix_seed(i2i_seed, (ii * i2i.outputs_per_input + k) as u64);
            let traj = policy.img2img_trajectory(&ctx, input, i2i.strength, seed)?;
            let image = decode(traj.final_state())?;
            let detections = plugins
                .detector
                .detect(&image)
                .map_err(|message| RewardError::Detector {
                    name: plugins.detector.name().to_string(),
                    image_ref: image.content_ref(),
                    message,
                })?;
            let clip = plugins
                .aligner
                .align(&image, &ctx.text)
                .map_err(|message| RewardError::Aligner {
                    name: plugins.aligner.name().to_string(),
                    image_ref: image.content_ref(),
                    prompt: ctx.text.clone(),
                    message,
                })?;
            Ok(ImageEvalRecord {
                prompt: ctx.text.clone(),
                detections,
                clip_score: Some(clip),
                aesthetic: None,
                image_ref: format!(
                    "{}#{k}:{}",
                    path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
                    image.content_ref()
                ),
            })
        });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let dataset = i2i
        .dataset_name
        .clone()
        .unwrap_or_else(|| format!("i2i-strength-{}", i2i.strength));
    let report = build_report(
        &records,
        &ReportConfig {
            dataset,
            unsafe_classes: table.unsafe_classes(),
            detection_threshold: i2i.detection_threshold,
            frechet: None,
            config_hash: config_hash.clone(),
        },
    )?;
    let summary = I2iSummary {
        report,
        strength: i2i.strength,
        outputs_per_input: i2i.outputs_per_input,
        n_inputs: inputs.len(),
        skipped,
    };

    let records_path = out_dir.join("i2i_records.jsonl");
    write_records(&records_path, &summary.report.records)?;
    let summary_path = out_dir.join("i2i_summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )
    .map_err(io_err(&summary_path))?;
    Ok(I2iArtifacts {
        records_path,
        summary_path,
        summary,
    })
}

// ----------------------------------------------------------------------
// attack
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPromptSummary {
    pub initial_prompt: String,
    pub final_prompt: String,
    pub success: bool,
    pub best_similarity: f64,
    pub queries_used: usize,
    pub final_flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub nudity_pct: f64,
    pub n_prompts: usize,
    pub n_flagged: usize,
    pub n_success: usize,
    pub similarity_threshold: f64,
    pub query_budget: usize,
    pub strategy: crate::attack::SearchStrategy,
    pub config_hash: String,
    pub per_prompt: Vec<AttackPromptSummary>,
    pub failures: Vec<SkippedInput>,
}

#[derive(Debug, Clone)]
pub struct AttackArtifacts {
    pub transcript_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: AttackSummary,
    pub defense: DefenseEval,
}

/// One transcript line per query, tagged with the prompt index.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranscriptLine {
    prompt_index: usize,
    iteration: usize,
    prompt: String,
    similarity: f64,
    flagged: bool,
}

pub fn attack_config_from(cfg: &RunConfig) -> Result<AttackConfig, PipelineError> {
    let section = cfg.attack_section()?;
    let vocabulary = if !section.vocabulary.is_empty() {
        section.vocabulary.clone()
    } else if let Some(path) = &section.vocabulary_path {
        std::fs::read_to_string(path)
            .map_err(io_err(path))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        default_attack_vocabulary(&cfg.synthetic)
    };
    Ok(AttackConfig {
        similarity_threshold: section.similarity_threshold,
        query_budget: section.query_budget,
        vocabulary,
        search_strategy: section.strategy,
        seed: mix_seed(cfg.seed, ATTACK_SALT),
        bandit_temperature: section.bandit_temperature,
        bandit_learning_rate: section.bandit_learning_rate,
    })
}

/// Runs the black-box attack over the prompt list against the configured
/// checkpoint (or the base policy) and writes transcript + summary.
pub fn run_attack(cfg: &RunConfig, out_dir: &Path) -> Result<AttackArtifacts, PipelineError> {
    cfg.validate()?;
    let section = cfg.attack_section()?.clone();
    let config_hash = cfg.config_hash();
    let plugins = build_plugins(cfg)?;
    let table = weight_table(cfg, &plugins)?;
    let policy = policy_from_checkpoint(cfg, section.checkpoint.as_ref())?;
    let target = ToyTarget::new(policy, plugins.embedder.clone());
    let flagger = ImageFlagger::new(
        plugins.detector.clone(),
        table.unsafe_classes(),
        section.detection_threshold,
    );
    let attack_cfg = attack_config_from(cfg)?;
    let prompts = load_prompts(&section.prompts, &section.prompt_format()?)?.texts();

    let indexed: Vec<(usize, String)> = prompts.into_iter().enumerate().collect();
    let outcomes: Vec<AttackOutcome> = map_jobs(indexed, cfg.workers, |(i, prompt)| {
        attack_outcome(&target, &prompt, &plugins.similarity, &flagger, &attack_cfg, i)
    });
    let defense = summarize_defense(outcomes);

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let transcript_path = out_dir.join("transcript.jsonl");
    let mut lines = String::new();
    let mut per_prompt = Vec::new();
    let mut failures = Vec::new();
    for (i, outcome) in defense.outcomes.iter().enumerate() {
        match outcome {
            AttackOutcome::Completed(r) => {
                for entry in &r.transcript {
                    let line = TranscriptLine {
                        prompt_index: i,
                        iteration: entry.iteration,
                        prompt: entry.prompt.clone(),
                        similarity: entry.similarity,
                        flagged: entry.flagged,
                    };
                    lines.push_str(&serde_json::to_string(&line).expect("line serializes"));
                    lines.push('\n');
                }
                per_prompt.push(AttackPromptSummary {
                    initial_prompt: r.initial_prompt.clone(),
                    final_prompt: r.final_prompt.clone(),
                    success: r.success,
                    best_similarity: r.best_similarity,
                    queries_used: r.queries_used,
                    final_flagged: r.final_flagged,
                });
            }
            AttackOutcome::Failed { prompt, error } => failures.push(SkippedInput {
                path: prompt.clone(),
                error: error.clone(),
            }),
        }
    }
    std::fs::write(&transcript_path, lines).map_err(io_err(&transcript_path))?;

    let summary = AttackSummary {
        nudity_pct: defense.nudity_pct,
        n_prompts: defense.n_prompts,
        n_flagged: defense.n_flagged,
        n_success: defense.n_success,
        similarity_threshold: attack_cfg.similarity_threshold,
        query_budget: attack_cfg.query_budget,
        strategy: attack_cfg.search_strategy,
        config_hash,
        per_prompt,
        failures,
    };
    let summary_path = out_dir.join("attack_summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )
    .map_err(io_err(&summary_path))?;
    Ok(AttackArtifacts {
        transcript_path,
        summary_path,
        summary,
        defense,
    })
}

// ----------------------------------------------------------------------
// report
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReportArtifacts {
    pub report_path: PathBuf,
    pub markdown_path: PathBuf,
    pub reports: Vec<MetricReport>,
}

/// Rebuilds reports from existing records files (one labeled method per
/// file) and renders a combined table.
pub fn run_report(
    cfg: &RunConfig,
    labeled_records: &[(String, PathBuf)],
    out_dir: &Path,
) -> Result<ReportArtifacts, PipelineError> {
    cfg.validate()?;
    let config_hash = cfg.config_hash();
    let plugins = build_plugins(cfg)?;
    let table = weight_table(cfg, &plugins)?;
    let threshold = cfg
        .eval
        .as_ref()
        .map(|e| e.detection_threshold)
        .unwrap_or(0.0);
    let mut reports = Vec::new();
    for (label, path) in labeled_records {
        let records = read_records(path)?;
        reports.push(build_report(
            &records,
            &ReportConfig {
                dataset: label.clone(),
                unsafe_classes: table.unsafe_classes(),
                detection_threshold: threshold,
                frechet: None,
                config_hash: config_hash.clone(),
            },
        )?);
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let report_path = out_dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_vec_pretty(&reports).expect("reports serialize"),
    )
    .map_err(io_err(&report_path))?;
    let markdown_path = out_dir.join("report.md");
    let refs: Vec<&MetricReport> = reports.iter().collect();
    std::fs::write(&markdown_path, crate::metrics::render_markdown(&refs))
        .map_err(io_err(&markdown_path))?;
    Ok(ReportArtifacts {
        report_path,
        markdown_path,
        reports,
    })
}
