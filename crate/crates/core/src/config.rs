//! Declarative run configuration (TOML).
//!
//! One schema shared by every command; unknown keys are rejected and the
//! schema version is checked on load. Reports embed the SHA-256 of the
//! resolved config so every artifact is traceable to the exact settings
//! that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::hex_string;
use crate::policy::PolicyConfig;
use crate::prompts::PromptFormat;
use crate::reward::FaceRewardSpec;
use crate::synthetic::SyntheticConfig;
use crate::trainer::TrainerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config parse failure: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("config validation: {0}")]
    Invalid(String),
    #[error("command requires the [{0}] config section")]
    MissingSection(&'static str),
}

fn default_workers() -> usize {
    1
}

fn default_seed() -> u64 {
    42
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub lora: LoraSection,
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i2i: Option<I2iSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
    pub init_seed: u64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 4,
            alpha: 4.0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub lambda_align: f64,
    pub lambda_nudity: f64,
    pub detector: String,
    pub aligner: String,
    pub face_analyzer: String,
    /// Optional JSON override: class -> {weight, unsafe}; defaults to every
    /// detector class unsafe with weight 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub face_terms: Vec<FaceRewardSpec>,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            lambda_align: 1.0,
            lambda_nudity: 1.0,
            detector: "quadrant".into(),
            aligner: "pattern".into(),
            face_analyzer: "probe".into(),
            class_weights_path: None,
            face_terms: Vec::new(),
        }
    }
}

/// Prompt file format selector shared by the sections that load prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormatName {
    #[default]
    Lines,
    Csv,
}

fn resolve_format(
    format: PromptFormatName,
    csv_column: &Option<String>,
    csv_tag_column: &Option<String>,
) -> Result<PromptFormat, ConfigError> {
    match format {
        PromptFormatName::Lines => Ok(PromptFormat::Lines),
        PromptFormatName::Csv => Ok(PromptFormat::Csv {
            column: csv_column
                .clone()
                .ok_or_else(|| ConfigError::Invalid("csv format requires csv_column".into()))?,
            tag_column: csv_tag_column.clone(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub batch_size: usize,
    pub inner_epochs: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub advantage_norm: crate::trainer::AdvantageNorm,
    pub total_rounds: usize,
    /// Section seed salt, mixed with the top-level seed.
    pub seed: u64,
    pub unsafe_fraction: f64,
    /// Training prompt pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    pub format: PromptFormatName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_tag_column: Option<String>,
    /// Checkpoint cadence in rounds (a final checkpoint is always written).
    pub checkpoint_every: usize,
    /// Resume from a trainer checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let p = TrainerConfig::default();
        Self {
            batch_size: p.batch_size,
            inner_epochs: p.inner_epochs,
            clip_epsilon: p.clip_epsilon,
            learning_rate: p.learning_rate,
            advantage_norm: p.advantage_norm,
            total_rounds: p.total_rounds,
            seed: p.seed,
            unsafe_fraction: p.unsafe_fraction,
            prompts: None,
            format: PromptFormatName::Lines,
            csv_column: None,
            csv_tag_column: None,
            checkpoint_every: 10,
            resume_from: None,
        }
    }
}

impl TrainerSection {
    pub fn params(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            inner_epochs: self.inner_epochs,
            clip_epsilon: self.clip_epsilon,
            learning_rate: self.learning_rate,
            advantage_norm: self.advantage_norm,
            total_rounds: self.total_rounds,
            seed: self.seed,
            unsafe_fraction: self.unsafe_fraction,
        }
    }

    pub fn prompt_format(&self) -> Result<PromptFormat, ConfigError> {
        resolve_format(self.format, &self.csv_column, &self.csv_tag_column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub prompts: PathBuf,
    #[serde(default)]
    pub format: PromptFormatName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_tag_column: Option<String>,
    /// Checkpoint to evaluate; omitted means the synthetic pretrained
    /// policy (the "base model").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_n_per_prompt")]
    pub n_per_prompt: usize,
    #[serde(default)]
    pub detection_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
    /// Directory of reference images for the Fréchet distance (omitted:
    /// no Fréchet column).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frechet_reference: Option<PathBuf>,
    #[serde(default = "default_features")]
    pub feature_extractor: String,
    #[serde(default = "default_aesthetic")]
    pub aesthetic: String,
}

fn default_n_per_prompt() -> usize {
    1
}

fn default_features() -> String {
    "raw_pixels".into()
}

fn default_aesthetic() -> String {
    "smoothness".into()
}

impl EvalSection {
    pub fn prompt_format(&self) -> Result<PromptFormat, ConfigError> {
        resolve_format(self.format, &self.csv_column, &self.csv_tag_column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2iSection {
    pub input_dir: PathBuf,
    pub prompt: String,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default = "default_outputs_per_input")]
    pub outputs_per_input: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub detection_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
}

fn default_strength() -> f64 {
    0.5
}

fn default_outputs_per_input() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub prompts: PathBuf,
    #[serde(default)]
    pub format: PromptFormatName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_tag_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_similarity_threshold")]
    pub similarity_threshold: f64,
    #[serde(default = "default_query_budget")]
    pub query_budget: usize,
    /// Substitution vocabulary; empty means the built-in synthetic list.
    #[serde(default)]
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_path: Option<PathBuf>,
    #[serde(default)]
    pub strategy: crate::attack::SearchStrategy,
    #[serde(default)]
    pub detection_threshold: f64,
    #[serde(default = "default_bandit_temperature")]
    pub bandit_temperature: f64,
    #[serde(default = "default_bandit_learning_rate")]
    pub bandit_learning_rate: f64,
}

fn default_similarity_threshold() -> f64 {
    0.28
}

fn default_query_budget() -> usize {
    200
}

fn default_bandit_temperature() -> f64 {
    0.5
}

fn default_bandit_learning_rate() -> f64 {
    1.0
}

impl AttackSection {
    pub fn prompt_format(&self) -> Result<PromptFormat, ConfigError> {
        resolve_format(self.format, &self.csv_column, &self.csv_tag_column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    pub write_images: bool,
    /// Also export a factors-only LoRA file next to each checkpoint.
    pub export_lora_only: bool,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            write_images: true,
            export_lora_only: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: cfg.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Semantic validation beyond type checking; runs before any compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return invalid("workers must be >= 1".into());
        }
        if self.policy.num_steps == 0 {
            return invalid("policy.num_steps must be >= 1".into());
        }
        if self.policy.sigma_first <= 0.0 || self.policy.sigma_last <= 0.0 {
            return invalid("policy sigma endpoints must be positive".into());
        }
        if self.policy.latent_dim() == 0 || self.policy.context_dim == 0 {
            return invalid("policy shape must be non-degenerate".into());
        }
        if self.reward.lambda_align < 0.0 || self.reward.lambda_nudity < 0.0 {
            return invalid("reward lambdas must be >= 0".into());
        }
        for t in &self.reward.face_terms {
            if t.lambda < 0.0 {
                return invalid("face term lambda must be >= 0".into());
            }
            if t.tau <= 0.0 {
                return invalid("face term tau must be > 0".into());
            }
        }
        if self.lora.enabled {
            let max = self.policy.latent_dim().min(self.policy.feature_dim());
            if self.lora.rank == 0 || self.lora.rank >= max {
                return invalid(format!(
                    "lora.rank {} outside [1, {})",
                    self.lora.rank, max
                ));
            }
        }
        self.trainer
            .params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trainer.prompt_format()?;
        if let Some(eval) = &self.eval {
            if eval.n_per_prompt == 0 {
                return invalid("eval.n_per_prompt must be >= 1".into());
            }
            eval.prompt_format()?;
        }
        if let Some(i2i) = &self.i2i {
            if !(i2i.strength > 0.0 && i2i.strength <= 1.0) {
                return invalid(format!("i2i.strength {} outside (0, 1]", i2i.strength));
            }
            if i2i.outputs_per_input == 0 {
                return invalid("i2i.outputs_per_input must be >= 1".into());
            }
        }
        if let Some(attack) = &self.attack {
            if !(attack.similarity_threshold > 0.0 && attack.similarity_threshold <= 1.0) {
                return invalid(format!(
                    "attack.similarity_threshold {} outside (0, 1]",
                    attack.similarity_threshold
                ));
            }
            if attack.query_budget == 0 {
                return invalid("attack.query_budget must be >= 1".into());
            }
            attack.prompt_format()?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hex_string(&hasher.finalize())
    }

    pub fn eval_section(&self) -> Result<&EvalSection, ConfigError> {
        self.eval.as_ref().ok_or(ConfigError::MissingSection("eval"))
    }

    pub fn i2i_section(&self) -> Result<&I2iSection, ConfigError> {
        self.i2i.as_ref().ok_or(ConfigError::MissingSection("i2i"))
    }

    pub fn attack_section(&self) -> Result<&AttackSection, ConfigError> {
        self.attack
            .as_ref()
            .ok_or(ConfigError::MissingSection("attack"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        "schema_version = 1\n".to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(&minimal()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.policy.num_steps, 10);
        assert!(cfg.lora.enabled);
        assert_eq!(cfg.reward.lambda_align, 1.0);
        assert_eq!(cfg.trainer.total_rounds, 30);
    }

    #[test]
    fn schema_version_is_checked() {
        let err = RunConfig::from_toml_str("schema_version = 99\n").unwrap_err();
        assert!(matches!(err, ConfigError::SchemaVersion { found: 99, .. }));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("schema_version = 1\nmystery = true\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = RunConfig::from_toml_str(
            "schema_version = 1\n[policy]\nnum_steps = 5\nbogus_knob = 1\n",
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn negative_lambda_fails_validation_before_compute() {
        let toml = "schema_version = 1\n[reward]\nlambda_align = -0.5\n";
        assert!(matches!(
            RunConfig::from_toml_str(toml),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::from_toml_str(&minimal()).unwrap();
        let b = RunConfig::from_toml_str(&minimal()).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = RunConfig::from_toml_str(&minimal()).unwrap();
        c.seed = 43;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    /// Every tunable named in the module design notes must be reachable
    /// from the run config; this test sets each one from TOML and checks
    /// the parsed value.
    #[test]
    fn schema_reaches_every_documented_tunable() {
        let toml = r#"
schema_version = 1
seed = 7
workers = 2

[policy]
channels = 1
height = 8
width = 8
num_steps = 10
sigma_first = 0.25
sigma_last = 0.9
context_dim = 8
step_scale = 1.1

[synthetic]
lexicon = ["nude", "nsfw"]
leak_fraction = 0.15
leak_max = 0.7
pattern_seed = 13
unsafe_gain = 0.75
content_scale = 0.6
kappa = 0.9
quadrant = "top_left"
sharpness = 2.5
align_raw_prompt = false

[lora]
enabled = true
rank = 4
alpha = 4.0
init_seed = 3

[reward]
lambda_align = 0.8
lambda_nudity = 1.2
detector = "quadrant"
aligner = "pattern"
face_analyzer = "probe"
class_weights_path = "weights.json"
[[reward.face_terms]]
kind = "age"
reference = 30.0
lambda = 0.5
tau = 10.0

[trainer]
batch_size = 16
inner_epochs = 3
clip_epsilon = 0.2
learning_rate = 0.01
advantage_norm = "per_batch"
total_rounds = 5
seed = 1
unsafe_fraction = 0.6
prompts = "train.txt"
format = "lines"
checkpoint_every = 2
resume_from = "prev.ckpt"

[eval]
prompts = "eval.csv"
format = "csv"
csv_column = "prompt"
csv_tag_column = "tag"
checkpoint = "final.ckpt"
n_per_prompt = 2
detection_threshold = 0.75
dataset_name = "toy"
frechet_reference = "ref_images"
feature_extractor = "raw_pixels"
aesthetic = "smoothness"

[i2i]
input_dir = "inputs"
prompt = "a photo of a person"
strength = 0.5
outputs_per_input = 5
detection_threshold = 0.75

[attack]
prompts = "nsfw_list.txt"
format = "lines"
similarity_threshold = 0.28
query_budget = 200
vocabulary = ["a", "b"]
strategy = "rl_bandit"
detection_threshold = 0.75
bandit_temperature = 0.4
bandit_learning_rate = 0.9

[io]
out_dir = "runs/demo"
write_images = false
export_lora_only = true
"#;
        let cfg = RunConfig::from_toml_str(toml).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.policy.sigma_first, 0.25);
        assert_eq!(cfg.policy.sigma_last, 0.9);
        assert_eq!(cfg.policy.step_scale, 1.1);
        assert_eq!(cfg.synthetic.lexicon, vec!["nude", "nsfw"]);
        assert_eq!(cfg.synthetic.leak_fraction, 0.15);
        assert_eq!(cfg.synthetic.leak_max, 0.7);
        assert_eq!(cfg.synthetic.pattern_seed, 13);
        assert_eq!(cfg.synthetic.unsafe_gain, 0.75);
        assert_eq!(cfg.synthetic.content_scale, 0.6);
        assert_eq!(cfg.synthetic.kappa, 0.9);
        assert_eq!(cfg.synthetic.sharpness, 2.5);
        assert!(!cfg.synthetic.align_raw_prompt);
        assert_eq!(cfg.lora.rank, 4);
        assert_eq!(cfg.lora.alpha, 4.0);
        assert_eq!(cfg.lora.init_seed, 3);
        assert_eq!(cfg.reward.lambda_align, 0.8);
        assert_eq!(cfg.reward.lambda_nudity, 1.2);
        assert_eq!(
            cfg.reward.class_weights_path.as_deref(),
            Some(Path::new("weights.json"))
        );
        assert_eq!(cfg.reward.face_terms.len(), 1);
        assert_eq!(cfg.reward.face_terms[0].tau, 10.0);
        assert_eq!(cfg.trainer.batch_size, 16);
        assert_eq!(cfg.trainer.inner_epochs, 3);
        assert_eq!(cfg.trainer.clip_epsilon, 0.2);
        assert_eq!(cfg.trainer.learning_rate, 0.01);
        assert_eq!(cfg.trainer.unsafe_fraction, 0.6);
        assert_eq!(cfg.trainer.checkpoint_every, 2);
        assert_eq!(
            cfg.trainer.resume_from.as_deref(),
            Some(Path::new("prev.ckpt"))
        );
        let eval = cfg.eval_section().unwrap();
        assert_eq!(eval.n_per_prompt, 2);
        assert_eq!(eval.detection_threshold, 0.75);
        assert_eq!(eval.dataset_name.as_deref(), Some("toy"));
        assert!(matches!(eval.prompt_format().unwrap(), PromptFormat::Csv { .. }));
        let i2i = cfg.i2i_section().unwrap();
        assert_eq!(i2i.strength, 0.5);
        assert_eq!(i2i.outputs_per_input, 5);
        let attack = cfg.attack_section().unwrap();
        assert_eq!(attack.similarity_threshold, 0.28);
        assert_eq!(attack.query_budget, 200);
        assert_eq!(
            attack.strategy,
            crate::attack::SearchStrategy::RlBandit
        );
        assert!(!cfg.io.write_images);
        assert!(cfg.io.export_lora_only);
    }

    #[test]
    fn missing_sections_reported_by_name() {
        let cfg = RunConfig::from_toml_str(&minimal()).unwrap();
        assert!(matches!(
            cfg.eval_section(),
            Err(ConfigError::MissingSection("eval"))
        ));
        assert!(matches!(
            cfg.attack_section(),
            Err(ConfigError::MissingSection("attack"))
        ));
    }
}
