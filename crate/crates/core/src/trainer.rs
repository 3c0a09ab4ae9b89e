//! Policy-gradient fine-tuning against the composite safety reward.
//!
//! One round: sample prompts, collect trajectories and terminal rewards
//! under a frozen parameter snapshot, then take `inner_epochs` gradient
//! steps on the importance-sampled clipped surrogate
//!
//! ```text
//! L = -(1/N) sum_i sum_t min(rho_t A_i, clip(rho_t, 1-eps, 1+eps) A_i)
//! rho_t = exp(log p_theta - log p_theta_old)   (per timestep)
//! ```
//!
//! The surrogate sums over timesteps and averages over trajectories, so its
//! gradient at `theta = theta_old` (all ratios 1) is exactly the REINFORCE
//! estimate `(1/N) sum_i [sum_t grad log p](x0_i) A_i` on the same batch.
//! Advantages are batch-normalized rewards (no learned baseline): with only
//! terminal rewards at desk scale a critic buys nothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{decode, DenoisingPolicy, PolicyError, PromptContext, PromptTag, Trajectory};
use crate::reward::{RewardBreakdown, RewardEngine, RewardError};
use crate::seeding::{mix_seed, stream_rng};
use rand::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("prompt pool is empty")]
    EmptyPool,
    #[error("clip_epsilon must be positive, got {0}")]
    BadClipEpsilon(f64),
    #[error("batch_size must be >= 2 with per-batch advantage normalization, got {0}")]
    BatchTooSmall(usize),
    #[error("batch_size must be >= 1")]
    ZeroBatch,
    #[error("inner_epochs must be >= 1")]
    ZeroEpochs,
    #[error("unsafe_fraction {0} outside [0, 1]")]
    BadUnsafeFraction(f64),
    #[error("learning_rate must be finite and >= 0, got {0}")]
    BadLearningRate(f64),
    #[error("batch item {index} failed: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("non-finite gradient from trajectory {trajectory}")]
    NonFiniteGradient { trajectory: usize },
    #[error("batch has no behavior log-probs for trajectory {trajectory}")]
    MissingBehaviorLogProbs { trajectory: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// How rewards become advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    #[default]
    PerBatch,
    None,
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    /// Gradient passes per sampled batch (importance-sampled reuse).
    pub inner_epochs: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub advantage_norm: AdvantageNorm,
    pub total_rounds: usize,
    pub seed: u64,
    /// Probability of drawing from the unsafe-tagged part of the pool
    /// (falls back to uniform when the pool is not tagged both ways).
    pub unsafe_fraction: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            inner_epochs: 2,
            clip_epsilon: 0.1,
            learning_rate: 1e-3,
            advantage_norm: AdvantageNorm::PerBatch,
            total_rounds: 30,
            seed: 0,
            unsafe_fraction: 0.5,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatch);
        }
        if self.advantage_norm == AdvantageNorm::PerBatch && self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(TrainError::BadClipEpsilon(self.clip_epsilon));
        }
        if self.inner_epochs == 0 {
            return Err(TrainError::ZeroEpochs);
        }
        if !(0.0..=1.0).contains(&self.unsafe_fraction) {
            return Err(TrainError::BadUnsafeFraction(self.unsafe_fraction));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        Ok(())
    }
}

/// Trajectories with terminal rewards and the step log-probs frozen at
/// sampling time (the theta_old side of the importance ratios).
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub behavior_log_probs: Vec<Vec<f64>>,
    pub breakdowns: Vec<RewardBreakdown>,
}

/// Per-round training statistics (one JSON line per round in the stats log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub round: usize,
    pub mean_reward: f64,
    pub mean_nudity: f64,
    pub mean_alignment: f64,
    /// Fraction of (trajectory, step) ratios outside the clip range,
    /// aggregated over all inner epochs of the round.
    pub clipped_fraction: f64,
    /// L2 norm of the first inner epoch's gradient (the on-policy one).
    pub grad_norm: f64,
}

/// Uniform i.i.d. draws from the pool, deterministic per seed.
pub fn sample_prompts(
    pool: &[PromptContext],
    n: usize,
    seed: u64,
) -> Result<Vec<PromptContext>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let mut rng = stream_rng(seed, 0);
    Ok((0..n)
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect())
}

/// Tag-aware sampling: unsafe-tagged prompts with probability
/// `unsafe_fraction`, the rest of the pool otherwise. Falls back to uniform
/// when either side is empty.
pub fn sample_prompts_mixed(
    pool: &[PromptContext],
    n: usize,
    unsafe_fraction: f64,
    seed: u64,
) -> Result<Vec<PromptContext>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let unsafe_pool: Vec<&PromptContext> =
        pool.iter().filter(|p| p.tag == PromptTag::Unsafe).collect();
    let rest: Vec<&PromptContext> = pool.iter().filter(|p| p.tag != PromptTag::Unsafe).collect();
    if unsafe_pool.is_empty() || rest.is_empty() {
        return sample_prompts(pool, n, seed);
    }
    let mut rng = stream_rng(seed, 0);
    Ok((0..n)
        .map(|_| {
            if rng.gen::<f64>() < unsafe_fraction {
                unsafe_pool[rng.gen_range(0..unsafe_pool.len())].clone()
            } else {
                rest[rng.gen_range(0..rest.len())].clone()
            }
        })
        .collect())
}

/// Samples one trajectory per prompt under the (frozen) policy and scores
/// the decoded terminal image. Fail-fast: a partial batch would bias the
/// estimator.
pub fn collect_batch(
    policy: &DenoisingPolicy,
    prompts: &[PromptContext],
    engine: &RewardEngine,
    base_seed: u64,
) -> Result<TrajectoryBatch, TrainError> {
    let mut trajectories = Vec::with_capacity(prompts.len());
    let mut rewards = Vec::with_capacity(prompts.len());
    let mut behavior = Vec::with_capacity(prompts.len());
    let mut breakdowns = Vec::with_capacity(prompts.len());
    for (index, prompt) in prompts.iter().enumerate() {
        let item = (|| -> Result<(), TrainError> {
            let traj = policy.sample_trajectory(prompt, mix_seed(base_seed, index as u64))?;
            let image = decode(traj.final_state())?;
            let breakdown = engine.evaluate(&image, prompt)?;
            rewards.push(breakdown.total);
            behavior.push(traj.step_log_probs.clone());
            breakdowns.push(breakdown);
            trajectories.push(traj);
            Ok(())
        })();
        item.map_err(|source| TrainError::BatchItem {
            index,
            source: Box::new(source),
        })?;
    }
    Ok(TrajectoryBatch {
        trajectories,
        rewards,
        behavior_log_probs: behavior,
        breakdowns,
    })
}

/// Per-batch mode: `(r - mean) / std` with the population std; a batch with
/// std below 1e-8 yields all-zero advantages. `None` passes rewards through.
pub fn normalize_advantages(rewards: &[f64], mode: AdvantageNorm) -> Vec<f64> {
    match mode {
        AdvantageNorm::None => rewards.to_vec(),
        AdvantageNorm::PerBatch => {
            let n = rewards.len() as f64;
            if rewards.is_empty() {
                return Vec::new();
            }
            let mean = rewards.iter().sum::<f64>() / n;
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std < 1e-8 {
                return vec![0.0; rewards.len()];
            }
            rewards.iter().map(|r| (r - mean) / std).collect()
        }
    }
}

/// REINFORCE estimate on a batch sampled under the current parameters:
/// mean over trajectories of `[sum_t grad log p] * A`.
pub fn reinforce_gradient(
    batch: &TrajectoryBatch,
    policy: &DenoisingPolicy,
    mode: AdvantageNorm,
) -> Result<Vec<f64>, TrainError> {
    let advantages = normalize_advantages(&batch.rewards, mode);
    let mut grad = vec![0.0f64; policy.trainable_len()];
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let a = advantages[i];
        if a == 0.0 {
            continue;
        }
        for s in 0..traj.step_log_probs.len() {
            let (_, step_grad) =
                policy.log_prob_with_grad(&traj.states[s], &traj.states[s + 1], &traj.context)?;
            for (g, sg) in grad.iter_mut().zip(&step_grad) {
                *g += a * sg;
            }
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { trajectory: i });
        }
    }
    let n = batch.trajectories.len().max(1) as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok(grad)
}

/// Loss value, loss gradient, and clip diagnostics of one surrogate pass.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub loss: f64,
    /// Gradient of the loss (descent direction decreases the loss).
    pub grad: Vec<f64>,
    /// Fraction of per-step ratios outside `[1-eps, 1+eps]`.
    pub clipped_fraction: f64,
}

/// Clipped importance-sampled surrogate over a batch collected under
/// theta_old.
pub fn clipped_surrogate(
    batch: &TrajectoryBatch,
    policy: &DenoisingPolicy,
    clip_epsilon: f64,
    mode: AdvantageNorm,
) -> Result<SurrogateEval, TrainError> {
    if !(clip_epsilon > 0.0) {
        return Err(TrainError::BadClipEpsilon(clip_epsilon));
    }
    let advantages = normalize_advantages(&batch.rewards, mode);
    let n = batch.trajectories.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; policy.trainable_len()];
    let mut clipped = 0usize;
    let mut steps = 0usize;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        let behavior = batch
            .behavior_log_probs
            .get(i)
            .filter(|b| b.len() == traj.step_log_probs.len())
            .ok_or(TrainError::MissingBehaviorLogProbs { trajectory: i })?;
        let a = advantages[i];
        for s in 0..traj.step_log_probs.len() {
            let (logp, step_grad) =
                policy.log_prob_with_grad(&traj.states[s], &traj.states[s + 1], &traj.context)?;
            let rho = (logp - behavior[s]).exp();
            let rho_clipped = rho.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
            let unclipped_term = rho * a;
            let clipped_term = rho_clipped * a;
            let surr = unclipped_term.min(clipped_term);
            loss -= surr;
            steps += 1;
            if rho < 1.0 - clip_epsilon || rho > 1.0 + clip_epsilon {
                clipped += 1;
            }
            // d(-surr)/dtheta: the unclipped branch contributes
            // -A rho grad logp; a saturated clipped branch contributes 0.
            let take_unclipped = unclipped_term <= clipped_term;
            let coeff = if take_unclipped {
                -a * rho
            } else if rho_clipped == rho {
                -a * rho
            } else {
                0.0
            };
            if coeff != 0.0 {
                for (g, sg) in grad.iter_mut().zip(&step_grad) {
                    *g += coeff * sg;
                }
            }
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { trajectory: i });
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    Ok(SurrogateEval {
        loss,
        grad,
        clipped_fraction: if steps == 0 {
            0.0
        } else {
            clipped as f64 / steps as f64
        },
    })
}

/// Adaptive-moment first-order optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One descent step on `loss_grad`; returns the updated parameters.
    pub fn update(&mut self, params: &[f64], loss_grad: &[f64], lr: f64) -> Vec<f64> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * loss_grad[i];
                self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * loss_grad[i] * loss_grad[i];
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                p - lr * m_hat / (v_hat.sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Owns the policy, reward engine, prompt pool, and optimizer state across
/// rounds. Trajectory collection sees an immutable policy; the parameter
/// update is the single writer.
pub struct Trainer {
    policy: DenoisingPolicy,
    engine: RewardEngine,
    pool: Vec<PromptContext>,
    cfg: TrainerConfig,
    adam: AdamState,
    round: usize,
}

impl Trainer {
    pub fn new(
        policy: DenoisingPolicy,
        engine: RewardEngine,
        pool: Vec<PromptContext>,
        cfg: TrainerConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        let adam = AdamState::new(policy.trainable_len());
        Ok(Self {
            policy,
            engine,
            pool,
            cfg,
            adam,
            round: 0,
        })
    }

    /// Restores a trainer mid-run (checkpoint resume).
    pub fn resume(
        policy: DenoisingPolicy,
        engine: RewardEngine,
        pool: Vec<PromptContext>,
        cfg: TrainerConfig,
        adam: AdamState,
        round: usize,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        Ok(Self {
            policy,
            engine,
            pool,
            cfg,
            adam,
            round,
        })
    }

    pub fn policy(&self) -> &DenoisingPolicy {
        &self.policy
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// One full round: prompts -> batch under theta_old -> inner-epoch
    /// clipped-surrogate updates -> stats.
    pub fn train_round(&mut self) -> Result<TrainStats, TrainError> {
        let round = self.round;
        self.train_round_inner().map_err(|source| TrainError::Round {
            round,
            source: Box::new(source),
        })
    }

    fn train_round_inner(&mut self) -> Result<TrainStats, TrainError> {
        let round_seed = mix_seed(self.cfg.seed, 0x11_0000 + self.round as u64);
        let prompts = sample_prompts_mixed(
            &self.pool,
            self.cfg.batch_size,
            self.cfg.unsafe_fraction,
            mix_seed(round_seed, 1),
        )?;
        let batch = collect_batch(&self.policy, &prompts, &self.engine, mix_seed(round_seed, 2))?;

        let mut clipped_acc = 0.0;
        let mut first_grad_norm = 0.0;
        for epoch in 0..self.cfg.inner_epochs {
            let eval = clipped_surrogate(
                &batch,
                &self.policy,
                self.cfg.clip_epsilon,
                self.cfg.advantage_norm,
            )?;
            if epoch == 0 {
                first_grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            }
            clipped_acc += eval.clipped_fraction;
            let params = self.policy.trainable_read();
            let updated = self.adam.update(&params, &eval.grad, self.cfg.learning_rate);
            self.policy.trainable_write(&updated);
        }

        let n = batch.rewards.len() as f64;
        let stats = TrainStats {
            round: self.round,
            mean_reward: batch.rewards.iter().sum::<f64>() / n,
            mean_nudity: batch.breakdowns.iter().map(|b| b.nudity_term).sum::<f64>() / n,
            mean_alignment: batch
                .breakdowns
                .iter()
                .map(|b| b.alignment_term)
                .sum::<f64>()
                / n,
            clipped_fraction: clipped_acc / self.cfg.inner_epochs as f64,
            grad_norm: first_grad_norm,
        };
        self.round += 1;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Region;
    use crate::policy::PolicyConfig;
    use crate::reward::{ClassWeightTable, RewardEngine};
    use crate::synthetic::{
        pretrained_policy, PatternAligner, QuadrantDetector, SyntheticConfig, TargetPattern,
        TokenEmbedder, SYNTHETIC_UNSAFE_CLASS,
    };
    use std::sync::Arc;

    fn toy_engine() -> RewardEngine {
        let scfg = SyntheticConfig::default();
        let pcfg = PolicyConfig::default();
        let embedder = TokenEmbedder::new(pcfg.context_dim, &scfg);
        let pattern = TargetPattern::new(&pcfg, &scfg);
        RewardEngine::new(
            1.0,
            1.0,
            ClassWeightTable::uniform_unsafe([SYNTHETIC_UNSAFE_CLASS.to_string()]).unwrap(),
            Arc::new(QuadrantDetector::new(Region::TopLeft)),
            Arc::new(PatternAligner::new(embedder, pattern, &scfg)),
        )
        .unwrap()
    }

    fn toy_pool() -> Vec<PromptContext> {
        let scfg = SyntheticConfig::default();
        let embedder = TokenEmbedder::new(8, &scfg);
        vec![
            embedder.context("a nude figure in low light", PromptTag::Unsafe),
            embedder.context("explicit bare scene indoors", PromptTag::Unsafe),
            embedder.context("a calm mountain lake at dawn", PromptTag::Benign),
            embedder.context("a lighthouse above the waves", PromptTag::Benign),
        ]
    }

    #[test]
    fn sample_prompts_basics() {
        let pool = toy_pool();
        let one = vec![pool[0].clone()];
        let draws = sample_prompts(&one, 5, 3).unwrap();
        assert_eq!(draws.len(), 5);
        assert!(draws.iter().all(|p| p.text == pool[0].text));

        let a = sample_prompts(&pool, 10, 7).unwrap();
        let b = sample_prompts(&pool, 10, 7).unwrap();
        assert_eq!(a, b);
        assert!(sample_prompts(&[], 3, 0).is_err());
    }

    #[test]
    fn sample_prompts_frequency_within_binomial_bound() {
        let pool = toy_pool();
        let n = 10_000;
        let draws = sample_prompts(&pool, n, 123).unwrap();
        // Binomial(n, 1/4): sigma = sqrt(n * 1/4 * 3/4) ~ 43.3.
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for p in &pool {
            let count = draws.iter().filter(|d| d.text == p.text).count() as f64;
            assert!(
                (count - n as f64 * 0.25).abs() <= 3.0 * sigma,
                "prompt {:?} drawn {count} times",
                p.text
            );
        }
    }

    #[test]
    fn mixed_sampling_respects_fraction() {
        let pool = toy_pool();
        let draws = sample_prompts_mixed(&pool, 4000, 0.5, 9).unwrap();
        let n_unsafe = draws.iter().filter(|p| p.tag == PromptTag::Unsafe).count();
        let sigma = (4000.0f64 * 0.25).sqrt(); // Bernoulli(1/2) over 4000
        assert!((n_unsafe as f64 - 2000.0).abs() < 4.0 * sigma);
        // All-benign pool falls back to uniform.
        let benign: Vec<_> = pool
            .iter()
            .filter(|p| p.tag == PromptTag::Benign)
            .cloned()
            .collect();
        assert!(sample_prompts_mixed(&benign, 10, 0.5, 9).is_ok());
    }

    #[test]
    fn collect_batch_shapes_and_reproducibility() {
        let policy = pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        let engine = toy_engine();
        let prompts = sample_prompts(&toy_pool(), 6, 2).unwrap();
        let batch = collect_batch(&policy, &prompts, &engine, 55).unwrap();
        assert_eq!(batch.trajectories.len(), 6);
        assert_eq!(batch.rewards.len(), 6);
        assert_eq!(batch.behavior_log_probs.len(), 6);
        // Rewards reproducible from the stored trajectories by re-decoding.
        for (traj, reward) in batch.trajectories.iter().zip(&batch.rewards) {
            let image = decode(traj.final_state()).unwrap();
            let again = engine.evaluate(&image, &traj.context).unwrap();
            assert!((again.total - reward).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_advantages_cases() {
        assert_eq!(
            normalize_advantages(&[1.0, 1.0, 1.0], AdvantageNorm::PerBatch),
            vec![0.0, 0.0, 0.0]
        );
        let a = normalize_advantages(&[0.0, 2.0], AdvantageNorm::PerBatch);
        assert!((a[0] + 1.0).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
        assert_eq!(
            normalize_advantages(&[0.3, 0.9], AdvantageNorm::None),
            vec![0.3, 0.9]
        );
    }

    #[test]
    fn zero_advantages_zero_gradient() {
        let policy = pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        let engine = toy_engine();
        let prompts = sample_prompts(&toy_pool(), 4, 2).unwrap();
        let mut batch = collect_batch(&policy, &prompts, &engine, 3).unwrap();
        // Constant rewards center to zero advantages under per-batch norm.
        batch.rewards = vec![0.7; 4];
        let grad = reinforce_gradient(&batch, &policy, AdvantageNorm::PerBatch).unwrap();
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn surrogate_gradient_matches_reinforce_at_theta_old() {
        let policy = pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        let engine = toy_engine();
        let prompts = sample_prompts(&toy_pool(), 5, 21).unwrap();
        let batch = collect_batch(&policy, &prompts, &engine, 77).unwrap();
        let reinforce = reinforce_gradient(&batch, &policy, AdvantageNorm::PerBatch).unwrap();
        let eval =
            clipped_surrogate(&batch, &policy, 0.1, AdvantageNorm::PerBatch).unwrap();
        assert_eq!(eval.clipped_fraction, 0.0);
        for (r, s) in reinforce.iter().zip(&eval.grad) {
            // Ascent gradient vs loss (descent) gradient.
            assert!((r + s).abs() <= 1e-6, "{r} vs {s}");
        }
    }

    #[test]
    fn surrogate_hand_worked_case() {
        // One trajectory, one step, rho = 1.05, A = 2, eps = 0.1:
        // min(1.05*2, 1.1*2) = 2.1, loss = -2.1.
        let policy = DenoisingPolicy::identity(PolicyConfig {
            num_steps: 1,
            sigma_first: 1.0,
            sigma_last: 1.0,
            ..PolicyConfig::default()
        });
        let ctx = PromptContext {
            text: String::new(),
            embedding: vec![0.0; 8],
            tag: PromptTag::Unknown,
        };
        let traj = policy.sample_trajectory(&ctx, 4).unwrap();
        // Forge behavior log-probs so the ratio is exactly 1.05.
        let behavior = vec![traj.step_log_probs[0] - 1.05f64.ln()];
        let batch = TrajectoryBatch {
            trajectories: vec![traj],
            rewards: vec![2.0],
            behavior_log_probs: vec![behavior],
            breakdowns: vec![],
        };
        let eval = clipped_surrogate(&batch, &policy, 0.1, AdvantageNorm::None).unwrap();
        assert!((eval.loss + 2.1).abs() < 1e-9, "loss {}", eval.loss);
        assert_eq!(eval.clipped_fraction, 0.0);

        // rho = 1 + 2*eps with positive advantage: ratio clipped, zero
        // gradient contribution.
        let traj2 = policy.sample_trajectory(&ctx, 5).unwrap();
        let behavior2 = vec![traj2.step_log_probs[0] - 1.2f64.ln()];
        let batch2 = TrajectoryBatch {
            trajectories: vec![traj2],
            rewards: vec![2.0],
            behavior_log_probs: vec![behavior2],
            breakdowns: vec![],
        };
        let eval2 = clipped_surrogate(&batch2, &policy, 0.1, AdvantageNorm::None).unwrap();
        assert!((eval2.loss + 2.2).abs() < 1e-9); // clipped at 1.1 * 2
        assert_eq!(eval2.clipped_fraction, 1.0);
        assert!(eval2.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn missing_behavior_log_probs_is_an_error() {
        let policy = pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        let engine = toy_engine();
        let prompts = sample_prompts(&toy_pool(), 2, 2).unwrap();
        let mut batch = collect_batch(&policy, &prompts, &engine, 3).unwrap();
        batch.behavior_log_probs[1].pop();
        assert!(matches!(
            clipped_surrogate(&batch, &policy, 0.1, AdvantageNorm::None),
            Err(TrainError::MissingBehaviorLogProbs { trajectory: 1 })
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let policy = pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        let params_before = policy.trainable_read();
        let cfg = TrainerConfig {
            batch_size: 4,
            learning_rate: 0.0,
            total_rounds: 1,
            ..TrainerConfig::default()
        };
        let mut trainer = Trainer::new(policy, toy_engine(), toy_pool(), cfg).unwrap();
        let stats = trainer.train_round().unwrap();
        assert_eq!(stats.round, 0);
        assert!(stats.mean_reward.is_finite());
        assert_eq!(trainer.policy().trainable_read(), params_before);
    }

    #[test]
    fn unclipped_single_pass_follows_reinforce_direction() {
        // inner_epochs = 1 with a huge epsilon: the update is a plain
        // REINFORCE ascent step (as seen by Adam).
        let policy = pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        let engine = toy_engine();
        let pool = toy_pool();
        let cfg = TrainerConfig {
            batch_size: 4,
            inner_epochs: 1,
            clip_epsilon: 1e9,
            learning_rate: 1e-3,
            seed: 31,
            ..TrainerConfig::default()
        };
        // Reproduce the round's batch to get the REINFORCE gradient.
        let round_seed = mix_seed(31, 0x11_0000);
        let prompts =
            sample_prompts_mixed(&pool, 4, cfg.unsafe_fraction, mix_seed(round_seed, 1)).unwrap();
        let batch = collect_batch(&policy, &prompts, &engine, mix_seed(round_seed, 2)).unwrap();
        let ascent = reinforce_gradient(&batch, &policy, cfg.advantage_norm).unwrap();

        let before = policy.trainable_read();
        let mut trainer = Trainer::new(policy, engine, pool, cfg).unwrap();
        trainer.train_round().unwrap();
        let after = trainer.policy().trainable_read();
        // Each coordinate moved in the ascent direction (Adam's first step
        // is sign(m-hat) scaled, and m-hat has the gradient's sign).
        let mut checked = 0;
        for i in 0..before.len() {
            if ascent[i].abs() > 1e-9 {
                let moved = after[i] - before[i];
                if moved != 0.0 {
                    assert_eq!(moved.signum(), ascent[i].signum(), "coordinate {i}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no coordinates moved");
    }

    #[test]
    fn trainer_rounds_are_deterministic() {
        let mk = || {
            let policy =
                pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
            Trainer::new(
                policy,
                toy_engine(),
                toy_pool(),
                TrainerConfig {
                    batch_size: 4,
                    total_rounds: 2,
                    seed: 17,
                    learning_rate: 0.01,
                    ..TrainerConfig::default()
                },
            )
            .unwrap()
        };
        let mut t1 = mk();
        let mut t2 = mk();
        for _ in 0..2 {
            let s1 = t1.train_round().unwrap();
            let s2 = t2.train_round().unwrap();
            assert_eq!(s1, s2);
        }
        assert_eq!(t1.policy().trainable_read(), t2.policy().trainable_read());
    }

    #[test]
    fn lora_base_stays_frozen_through_training() {
        let mut policy =
            pretrained_policy(&PolicyConfig::default(), &SyntheticConfig::default());
        policy.enable_lora(4, 4.0, 99).unwrap();
        let base_hash = policy.frozen_base_hash().unwrap();
        let mut trainer = Trainer::new(
            policy,
            toy_engine(),
            toy_pool(),
            TrainerConfig {
                batch_size: 4,
                total_rounds: 3,
                learning_rate: 0.05,
                seed: 5,
                ..TrainerConfig::default()
            },
        )
        .unwrap();
        for _ in 0..3 {
            trainer.train_round().unwrap();
        }
        assert_eq!(trainer.policy().frozen_base_hash().unwrap(), base_hash);
        // And the factors did move.
        let moved = trainer
            .policy()
            .trainable_read()
            .iter()
            .any(|v| v.abs() > 1e-6);
        assert!(moved);
    }

    #[test]
    fn config_validation() {
        let bad_eps = TrainerConfig {
            clip_epsilon: 0.0,
            ..TrainerConfig::default()
        };
        assert!(bad_eps.validate().is_err());
        let bad_batch = TrainerConfig {
            batch_size: 1,
            advantage_norm: AdvantageNorm::PerBatch,
            ..TrainerConfig::default()
        };
        assert!(bad_batch.validate().is_err());
        let ok_batch = TrainerConfig {
            batch_size: 1,
            advantage_norm: AdvantageNorm::None,
            ..TrainerConfig::default()
        };
        assert!(ok_batch.validate().is_ok());
    }
}
