//! RL fine-tuning of diffusion policies against a content-safety reward.
//!
//! The crate implements the full loop at desk scale: a differentiable toy
//! denoising policy with optional LoRA adapters, a composite reward engine
//! over pluggable detectors and aligners, a DDPO-style policy-gradient
//! trainer (REINFORCE plus an importance-sampled clipped surrogate), the
//! evaluation metrics (removal rate, nudity score, NRLSA, Fréchet distance),
//! a black-box adversarial prompt attack harness, and the command pipeline
//! with reproducible checkpoints and reports.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod pipeline;
pub mod plugins;
pub mod policy;
pub mod prompts;
pub mod reward;
pub mod seeding;
pub mod synthetic;
pub mod trainer;

pub use config::RunConfig;
pub use image::{Image, Region};
pub use lora::LoraLayer;
pub use policy::{decode, encode, DenoisingPolicy, LatentState, PolicyConfig, PromptContext, PromptTag, Trajectory};
pub use reward::{DetectionResult, RewardBreakdown, RewardEngine};
pub use trainer::{Trainer, TrainerConfig, TrainStats};
