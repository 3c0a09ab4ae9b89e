//! Conditional denoising policy `p(x_{t-1} | x_t, c)`.
//!
//! The reverse process is a Gaussian whose mean is a learned residual update
//! of the current latent and whose per-step standard deviation follows a
//! fixed linear schedule:
//!
//! ```text
//! mu(x_t, t, c)  = x_t + S * tanh(W [flatten(x_t); t/T; c] + b)
//! x_{t-1}       ~ Normal(mu, sigma_t^2 I)
//! ```
//!
//! With zero weights the mean is exactly the identity map, which is the
//! smallest policy that still supports context-dependent behavior once `W`
//! moves. The weight matrix may be wrapped by a [`LoraLayer`], in which case
//! only the low-rank factors are trainable and the base (and bias) stay
//! frozen. All parameters are stored as `f32` (matching the checkpoint block
//! format); every computation runs in `f64`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::lora::{LoraError, LoraLayer};
use crate::seeding::stream_rng;

/// Stream index for the initial `x_T` draw.
const INIT_STREAM: u64 = u64::MAX;
/// Stream base for forward (noising) steps in img2img.
const FORWARD_STREAM_BASE: u64 = 1 << 32;
/// Cap on the forward-noising variance per step.
const MAX_FORWARD_BETA: f64 = 0.999;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context embedding has dimension {got}, policy expects {expected}")]
    ContextDimension { expected: usize, got: usize },
    #[error("latent has {got} values, policy expects {expected}")]
    LatentDimension { expected: usize, got: usize },
    #[error("timestep mismatch: x_t at {upper} must be one above x_prev at {lower}")]
    TimestepMismatch { upper: usize, lower: usize },
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("policy divergence: non-finite mean at timestep {timestep}")]
    Divergence { timestep: usize },
    #[error("decode requires timestep 0, got {timestep}")]
    NonzeroTimestep { timestep: usize },
    #[error("img2img strength {strength} outside (0, 1]")]
    StrengthOutOfRange { strength: f64 },
    #[error("image shape {0}x{1}x{2} does not match policy latent shape")]
    ImageShape(usize, usize, usize),
    #[error("lora adapter already enabled")]
    LoraAlreadyEnabled,
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// How prompts in a pool are labeled; `Unknown` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    Benign,
    Unsafe,
    #[default]
    Unknown,
}

/// Conditioning context: prompt text plus its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub text: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub tag: PromptTag,
}

/// Latent tensor of shape (C, H, W) at a given diffusion timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub timestep: usize,
}

impl LatentState {
    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// One recorded denoising chain with per-step log-probabilities.
///
/// `states` runs from the starting timestep down to 0 and always has one
/// more entry than `step_log_probs`; `step_log_probs[i]` is the log-density
/// of the transition `states[i] -> states[i+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub context: PromptContext,
    pub states: Vec<LatentState>,
    pub step_log_probs: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn start_timestep(&self) -> usize {
        self.states.first().map(|s| s.timestep).unwrap_or(0)
    }

    pub fn final_state(&self) -> &LatentState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Total log-density of the chain (sum of step log-probs).
    pub fn chain_log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

/// Shape and schedule configuration of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of denoising steps `T`.
    pub num_steps: usize,
    /// Noise scale at t = 1 (the final denoising step).
    pub sigma_first: f64,
    /// Noise scale at t = T (the first denoising step).
    pub sigma_last: f64,
    /// Context embedding dimension `E`.
    pub context_dim: usize,
    /// Bound `S` on the per-step mean update.
    pub step_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 8,
            width: 8,
            num_steps: 10,
            sigma_first: 0.2,
            sigma_last: 1.0,
            context_dim: 8,
            step_scale: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn latent_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Feature vector length: latent + normalized timestep + context.
    pub fn feature_dim(&self) -> usize {
        self.latent_dim() + 1 + self.context_dim
    }
}

/// Mean-map parameters: plain dense, or dense base wrapped by LoRA factors.
/// The bias is trainable only in dense mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MeanParams {
    Dense { weight: Vec<f32>, bias: Vec<f32> },
    Lora { layer: LoraLayer, bias: Vec<f32> },
}

struct MeanCache {
    mu: Vec<f64>,
    pre_tanh: Vec<f64>,
    features: Vec<f64>,
    /// `A·z` for the LoRA path, reused by the backward pass.
    projected: Option<Vec<f64>>,
}

/// The denoising policy; immutable during sampling, single-writer for
/// parameter updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoisingPolicy {
    cfg: PolicyConfig,
    mean: MeanParams,
}

impl DenoisingPolicy {
    /// Policy with zero weights: the conditional mean is exactly `x_t`.
    pub fn identity(cfg: PolicyConfig) -> Self {
        let d = cfg.latent_dim();
        let f = cfg.feature_dim();
        Self {
            mean: MeanParams::Dense {
                weight: vec![0.0; d * f],
                bias: vec![0.0; d],
            },
            cfg,
        }
    }

    pub fn from_dense(cfg: PolicyConfig, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self, PolicyError> {
        let d = cfg.latent_dim();
        let f = cfg.feature_dim();
        if weight.len() != d * f {
            return Err(PolicyError::LatentDimension {
                expected: d * f,
                got: weight.len(),
            });
        }
        if bias.len() != d {
            return Err(PolicyError::LatentDimension {
                expected: d,
                got: bias.len(),
            });
        }
        Ok(Self {
            cfg,
            mean: MeanParams::Dense { weight, bias },
        })
    }

    pub fn from_parts(cfg: PolicyConfig, mean: MeanParams) -> Self {
        Self { cfg, mean }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn mean_params(&self) -> &MeanParams {
        &self.mean
    }

    pub(crate) fn mean_params_mut(&mut self) -> &mut MeanParams {
        &mut self.mean
    }

    pub fn is_lora(&self) -> bool {
        matches!(self.mean, MeanParams::Lora { .. })
    }

    /// Wraps the current dense weight as a frozen LoRA base. The bias
    /// freezes alongside it; only the factors train afterwards.
    pub fn enable_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<(), PolicyError> {
        let d = self.cfg.latent_dim();
        let f = self.cfg.feature_dim();
        match &self.mean {
            MeanParams::Dense { weight, bias } => {
                let layer = LoraLayer::init(weight.clone(), d, f, rank, alpha, seed)?;
                self.mean = MeanParams::Lora {
                    layer,
                    bias: bias.clone(),
                };
                Ok(())
            }
            MeanParams::Lora { .. } => Err(PolicyError::LoraAlreadyEnabled),
        }
    }

    /// Noise scale for the transition into `x_{t-1}`, `t` in `[1, T]`;
    /// linear between the configured endpoints.
    pub fn sigma(&self, t: usize) -> f64 {
        let steps = self.cfg.num_steps;
        if steps <= 1 {
            return self.cfg.sigma_first;
        }
        let frac = (t - 1) as f64 / (steps - 1) as f64;
        self.cfg.sigma_first + (self.cfg.sigma_last - self.cfg.sigma_first) * frac
    }

    /// Hash of the frozen base parameters (LoRA mode only).
    pub fn frozen_base_hash(&self) -> Option<String> {
        match &self.mean {
            MeanParams::Lora { layer, bias } => {
                use sha2::{Digest, Sha256};
                let mut h = Sha256::new();
                for v in layer.base() {
                    h.update(v.to_le_bytes());
                }
                for v in bias {
                    h.update(v.to_le_bytes());
                }
                Some(crate::image::hex_string(&h.finalize()))
            }
            MeanParams::Dense { .. } => None,
        }
    }

    // ------------------------------------------------------------------
    // Trainable parameter view
    // ------------------------------------------------------------------

    /// Layout: dense mode is `[weight, bias]`, LoRA mode is `[B, A]`.
    pub fn trainable_len(&self) -> usize {
        match &self.mean {
            MeanParams::Dense { weight, bias } => weight.len() + bias.len(),
            MeanParams::Lora { layer, .. } => layer.trainable_param_count(),
        }
    }

    pub fn trainable_read(&self) -> Vec<f64> {
        match &self.mean {
            MeanParams::Dense { weight, bias } => weight
                .iter()
                .chain(bias.iter())
                .map(|v| f64::from(*v))
                .collect(),
            MeanParams::Lora { layer, .. } => layer
                .factor_b()
                .iter()
                .chain(layer.factor_a().iter())
                .map(|v| f64::from(*v))
                .collect(),
        }
    }

    /// Overwrites the trainable parameters (values are quantized to f32,
    /// the storage dtype).
    pub fn trainable_write(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.trainable_len(), "parameter layout mismatch");
        match &mut self.mean {
            MeanParams::Dense { weight, bias } => {
                let nw = weight.len();
                for (dst, src) in weight.iter_mut().zip(&values[..nw]) {
                    *dst = *src as f32;
                }
                for (dst, src) in bias.iter_mut().zip(&values[nw..]) {
                    *dst = *src as f32;
                }
            }
            MeanParams::Lora { layer, .. } => {
                let nb = layer.factor_b().len();
                for (dst, src) in layer.factor_b_mut().iter_mut().zip(&values[..nb]) {
                    *dst = *src as f32;
                }
                for (dst, src) in layer.factor_a_mut().iter_mut().zip(&values[nb..]) {
                    *dst = *src as f32;
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Mean map
    // ------------------------------------------------------------------

    fn features(&self, latent: &[f64], t: usize, context: &PromptContext) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.cfg.feature_dim());
        z.extend_from_slice(latent);
        z.push(t as f64 / self.cfg.num_steps as f64);
        z.extend_from_slice(&context.embedding);
        z
    }

    fn mean_with_cache(&self, latent: &[f64], t: usize, context: &PromptContext) -> MeanCache {
        let d = self.cfg.latent_dim();
        let z = self.features(latent, t, context);
        let (mut pre, projected) = match &self.mean {
            MeanParams::Dense { weight, bias } => {
                let mut pre = vec![0.0f64; d];
                for (i, p) in pre.iter_mut().enumerate() {
                    let row = &weight[i * z.len()..(i + 1) * z.len()];
                    *p = f64::from(bias[i])
                        + row
                            .iter()
                            .zip(&z)
                            .map(|(w, v)| f64::from(*w) * v)
                            .sum::<f64>();
                }
                (pre, None)
            }
            MeanParams::Lora { layer, bias } => {
                let ax = layer.project(&z).expect("feature dim matches layer k");
                let s = layer.scale();
                let mut pre = vec![0.0f64; d];
                for (i, p) in pre.iter_mut().enumerate() {
                    let base_row = &layer.base()[i * z.len()..(i + 1) * z.len()];
                    let mut acc = f64::from(bias[i])
                        + base_row
                            .iter()
                            .zip(&z)
                            .map(|(w, v)| f64::from(*w) * v)
                            .sum::<f64>();
                    let b_row = &layer.factor_b()[i * layer.rank()..(i + 1) * layer.rank()];
                    acc += s
                        * b_row
                            .iter()
                            .zip(&ax)
                            .map(|(w, v)| f64::from(*w) * v)
                            .sum::<f64>();
                    *p = acc;
                }
                (pre, Some(ax))
            }
        };
        let mu = latent
            .iter()
            .zip(pre.iter_mut())
            .map(|(x, a)| x + self.cfg.step_scale * a.tanh())
            .collect();
        MeanCache {
            mu,
            pre_tanh: pre,
            features: z,
            projected,
        }
    }

    /// Conditional mean `mu(x_t, t, c)` (exposed for inspection/testing).
    pub fn mean(&self, x_t: &LatentState, context: &PromptContext) -> Result<Vec<f64>, PolicyError> {
        self.check_context(context)?;
        self.check_latent(x_t)?;
        Ok(self.mean_with_cache(&x_t.values, x_t.timestep, context).mu)
    }

    fn check_context(&self, context: &PromptContext) -> Result<(), PolicyError> {
        if context.embedding.len() != self.cfg.context_dim {
            return Err(PolicyError::ContextDimension {
                expected: self.cfg.context_dim,
                got: context.embedding.len(),
            });
        }
        Ok(())
    }

    fn check_latent(&self, state: &LatentState) -> Result<(), PolicyError> {
        if state.values.len() != self.cfg.latent_dim() {
            return Err(PolicyError::LatentDimension {
                expected: self.cfg.latent_dim(),
                got: state.values.len(),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Sampling
    // ------------------------------------------------------------------

    fn latent_state(&self, values: Vec<f64>, timestep: usize) -> LatentState {
        LatentState {
            channels: self.cfg.channels,
            height: self.cfg.height,
            width: self.cfg.width,
            values,
            timestep,
        }
    }

    fn draw_noise(&self, seed: u64, stream: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, stream);
        (0..self.cfg.latent_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect()
    }

    /// Denoises from `start` (exclusive of its own noise draw) down to t=0,
    /// recording states and per-step log-probs.
    fn denoise_from(
        &self,
        mut x: Vec<f64>,
        start: usize,
        context: &PromptContext,
        seed: u64,
    ) -> Result<(Vec<LatentState>, Vec<f64>), PolicyError> {
        let mut states = Vec::with_capacity(start + 1);
        let mut log_probs = Vec::with_capacity(start);
        states.push(self.latent_state(x.clone(), start));
        for t in (1..=start).rev() {
            let cache = self.mean_with_cache(&x, t, context);
            if !cache.mu.iter().all(|v| v.is_finite()) {
                return Err(PolicyError::Divergence { timestep: t });
            }
            let sigma = self.sigma(t);
            let noise = self.draw_noise(seed, t as u64);
            let x_prev: Vec<f64> = cache
                .mu
                .iter()
                .zip(&noise)
                .map(|(m, n)| m + sigma * n)
                .collect();
            log_probs.push(gaussian_log_density(&x_prev, &cache.mu, sigma));
            states.push(self.latent_state(x_prev.clone(), t - 1));
            x = x_prev;
        }
        Ok((states, log_probs))
    }

    /// Samples a full trajectory: `x_T ~ Normal(0, I)`, then T policy steps.
    /// Deterministic given (parameters, context, seed).
    pub fn sample_trajectory(
        &self,
        context: &PromptContext,
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        self.check_context(context)?;
        let x_start = self.draw_noise(seed, INIT_STREAM);
        let (states, step_log_probs) =
            self.denoise_from(x_start, self.cfg.num_steps, context, seed)?;
        Ok(Trajectory {
            context: context.clone(),
            states,
            step_log_probs,
            seed,
        })
    }

    /// Log-density of `x_prev` under `Normal(mu(x_t, t, c), sigma_t^2 I)`.
    pub fn log_prob(
        &self,
        x_t: &LatentState,
        x_prev: &LatentState,
        context: &PromptContext,
    ) -> Result<f64, PolicyError> {
        self.check_context(context)?;
        self.check_latent(x_t)?;
        self.check_latent(x_prev)?;
        if x_t.timestep != x_prev.timestep + 1 {
            return Err(PolicyError::TimestepMismatch {
                upper: x_t.timestep,
                lower: x_prev.timestep,
            });
        }
        let t = x_t.timestep;
        if t < 1 || t > self.cfg.num_steps {
            return Err(PolicyError::TimestepOutOfRange {
                t,
                max: self.cfg.num_steps,
            });
        }
        let cache = self.mean_with_cache(&x_t.values, t, context);
        Ok(gaussian_log_density(&x_prev.values, &cache.mu, self.sigma(t)))
    }

    /// Log-prob together with its gradient w.r.t. the trainable parameters
    /// (layout as in [`Self::trainable_read`]).
    pub fn log_prob_with_grad(
        &self,
        x_t: &LatentState,
        x_prev: &LatentState,
        context: &PromptContext,
    ) -> Result<(f64, Vec<f64>), PolicyError> {
        self.check_context(context)?;
        self.check_latent(x_t)?;
        self.check_latent(x_prev)?;
        if x_t.timestep != x_prev.timestep + 1 {
            return Err(PolicyError::TimestepMismatch {
                upper: x_t.timestep,
                lower: x_prev.timestep,
            });
        }
        let t = x_t.timestep;
        if t < 1 || t > self.cfg.num_steps {
            return Err(PolicyError::TimestepOutOfRange {
                t,
                max: self.cfg.num_steps,
            });
        }
        let cache = self.mean_with_cache(&x_t.values, t, context);
        let sigma = self.sigma(t);
        let log_prob = gaussian_log_density(&x_prev.values, &cache.mu, sigma);

        // d logp / d mu_i = (x_prev_i - mu_i) / sigma^2, then through the
        // residual tanh: d mu_i / d pre_i = S * (1 - tanh(pre_i)^2).
        let inv_var = 1.0 / (sigma * sigma);
        let d = self.cfg.latent_dim();
        let gate: Vec<f64> = (0..d)
            .map(|i| {
                let th = cache.pre_tanh[i].tanh();
                (x_prev.values[i] - cache.mu[i]) * inv_var * self.cfg.step_scale * (1.0 - th * th)
            })
            .collect();

        let z = &cache.features;
        let grad = match &self.mean {
            MeanParams::Dense { weight, bias } => {
                let mut grad = vec![0.0f64; weight.len() + bias.len()];
                for i in 0..d {
                    let row = &mut grad[i * z.len()..(i + 1) * z.len()];
                    for (g, zv) in row.iter_mut().zip(z) {
                        *g = gate[i] * zv;
                    }
                }
                for i in 0..d {
                    grad[weight.len() + i] = gate[i];
                }
                grad
            }
            MeanParams::Lora { layer, .. } => {
                let r = layer.rank();
                let s = layer.scale();
                let ax = cache.projected.as_ref().expect("lora cache");
                let nb = d * r;
                let mut grad = vec![0.0f64; nb + r * z.len()];
                // dB[i,q] = gate_i * s * (A z)_q
                for i in 0..d {
                    for q in 0..r {
                        grad[i * r + q] = gate[i] * s * ax[q];
                    }
                }
                // dA[q,j] = s * (sum_i gate_i B[i,q]) * z_j
                for q in 0..r {
                    let mut u = 0.0;
                    for i in 0..d {
                        u += gate[i] * f64::from(layer.factor_b()[i * r + q]);
                    }
                    let row = &mut grad[nb + q * z.len()..nb + (q + 1) * z.len()];
                    for (g, zv) in row.iter_mut().zip(z) {
                        *g = s * u * zv;
                    }
                }
                grad
            }
        };
        Ok((log_prob, grad))
    }

    // ------------------------------------------------------------------
    // Image mapping and img2img
    // ------------------------------------------------------------------

    /// Denoises an encoded input image from `t_start = max(1, round(s·T))`
    /// down to 0; the forward half re-noises the input with a
    /// variance-preserving schedule derived from the policy sigmas.
    pub fn img2img_trajectory(
        &self,
        context: &PromptContext,
        input: &Image,
        strength: f64,
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        self.check_context(context)?;
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(PolicyError::StrengthOutOfRange { strength });
        }
        if input.channels != self.cfg.channels
            || input.height != self.cfg.height
            || input.width != self.cfg.width
        {
            return Err(PolicyError::ImageShape(
                input.channels,
                input.height,
                input.width,
            ));
        }
        let t_f64 = strength * self.cfg.num_steps as f64;
        let t_start = (t_f64.round() as usize).max(1).min(self.cfg.num_steps);

        let mut x = encode(input).values;
        for t in 1..=t_start {
            let beta = (self.sigma(t) * self.sigma(t)).min(MAX_FORWARD_BETA);
            let noise = self.draw_noise(seed, FORWARD_STREAM_BASE + t as u64);
            for (xv, n) in x.iter_mut().zip(&noise) {
                *xv = (1.0 - beta).sqrt() * *xv + beta.sqrt() * n;
            }
        }
        let (states, step_log_probs) = self.denoise_from(x, t_start, context, seed)?;
        Ok(Trajectory {
            context: context.clone(),
            states,
            step_log_probs,
            seed,
        })
    }
}

/// Maps a terminal latent to an image in `[0, 1]` via the affine squash
/// `p = (x + 1) / 2`, clamped.
pub fn decode(x0: &LatentState) -> Result<Image, PolicyError> {
    if x0.timestep != 0 {
        return Err(PolicyError::NonzeroTimestep {
            timestep: x0.timestep,
        });
    }
    let pixels = x0.values.iter().map(|v| (v + 1.0) / 2.0).collect();
    Ok(Image::new(x0.channels, x0.height, x0.width, pixels)?)
}

/// Inverse of [`decode`] on in-range latents: `x = 2p - 1`, timestep 0.
pub fn encode(image: &Image) -> LatentState {
    LatentState {
        channels: image.channels,
        height: image.height,
        width: image.width,
        values: image.pixels().iter().map(|p| 2.0 * p - 1.0).collect(),
        timestep: 0,
    }
}

/// Log-density of an isotropic Gaussian with scalar standard deviation.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let ssd: f64 = x
        .iter()
        .zip(mu)
        .map(|(a, b)| {
            let diff = a - b;
            diff * diff
        })
        .sum();
    -0.5 * d * LN_2PI - d * sigma.ln() - ssd / (2.0 * sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(dim: usize) -> PromptContext {
        PromptContext {
            text: "test".into(),
            embedding: vec![0.0; dim],
            tag: PromptTag::Unknown,
        }
    }

    fn identity_cfg(t: usize) -> PolicyConfig {
        PolicyConfig {
            num_steps: t,
            sigma_first: 1.0,
            sigma_last: 1.0,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn identity_policy_log_probs_match_noise_density() {
        // mu == x_t and sigma == 1: each step log-prob is the standard
        // Gaussian log-density of the drawn noise.
        let policy = DenoisingPolicy::identity(identity_cfg(2));
        let traj = policy.sample_trajectory(&ctx(8), 0).unwrap();
        assert_eq!(traj.states.len(), 3);
        assert_eq!(traj.step_log_probs.len(), 2);
        for i in 0..2 {
            let noise: Vec<f64> = traj.states[i + 1]
                .values
                .iter()
                .zip(&traj.states[i].values)
                .map(|(a, b)| a - b)
                .collect();
            let expected: f64 = noise.iter().map(|n| -0.5 * LN_2PI - 0.5 * n * n).sum();
            assert!((traj.step_log_probs[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let policy = DenoisingPolicy::identity(identity_cfg(4));
        let a = policy.sample_trajectory(&ctx(8), 1234).unwrap();
        let b = policy.sample_trajectory(&ctx(8), 1234).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = policy.sample_trajectory(&ctx(8), 1235).unwrap();
        assert_ne!(a.states[0].values, c.states[0].values);
    }

    #[test]
    fn log_prob_at_mode_and_unit_offset() {
        let policy = DenoisingPolicy::identity(identity_cfg(2));
        let d = policy.config().latent_dim();
        let x_t = LatentState {
            channels: 1,
            height: 8,
            width: 8,
            values: vec![0.25; d],
            timestep: 1,
        };
        // x_prev at the mode (identity mean: same values, one step down).
        let mut x_prev = x_t.clone();
        x_prev.timestep = 0;
        let mode = policy.log_prob(&x_t, &x_prev, &ctx(8)).unwrap();
        assert!((mode - (-(d as f64) / 2.0 * LN_2PI)).abs() < 1e-12);
        // One coordinate offset by +1: mode value minus 1/2.
        x_prev.values[3] += 1.0;
        let off = policy.log_prob(&x_t, &x_prev, &ctx(8)).unwrap();
        assert!((off - (mode - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn replay_matches_stored_log_probs() {
        let policy = DenoisingPolicy::identity(identity_cfg(5));
        let traj = policy.sample_trajectory(&ctx(8), 42).unwrap();
        for i in 0..traj.step_log_probs.len() {
            let lp = policy
                .log_prob(&traj.states[i], &traj.states[i + 1], &traj.context)
                .unwrap();
            assert!((lp - traj.step_log_probs[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn chain_log_prob_matches_independent_recompute() {
        let policy = DenoisingPolicy::identity(identity_cfg(6));
        let traj = policy.sample_trajectory(&ctx(8), 7).unwrap();
        // Independent recompute with a locally written Gaussian density.
        let mut total = 0.0;
        for i in 0..traj.step_log_probs.len() {
            let t = traj.states[i].timestep;
            let mu = policy.mean(&traj.states[i], &traj.context).unwrap();
            let sigma = policy.sigma(t);
            let mut lp = 0.0;
            for (x, m) in traj.states[i + 1].values.iter().zip(&mu) {
                lp += -0.5 * (2.0 * std::f64::consts::PI).ln()
                    - sigma.ln()
                    - (x - m) * (x - m) / (2.0 * sigma * sigma);
            }
            total += lp;
        }
        assert!((total - traj.chain_log_prob()).abs() < 1e-5);
    }

    #[test]
    fn timestep_mismatch_rejected() {
        let policy = DenoisingPolicy::identity(identity_cfg(3));
        let traj = policy.sample_trajectory(&ctx(8), 0).unwrap();
        let err = policy
            .log_prob(&traj.states[0], &traj.states[2], &traj.context)
            .unwrap_err();
        assert!(matches!(err, PolicyError::TimestepMismatch { .. }));
    }

    #[test]
    fn decode_midpoint_extremes_and_monotonicity() {
        let zeros = LatentState {
            channels: 1,
            height: 2,
            width: 2,
            values: vec![0.0; 4],
            timestep: 0,
        };
        let img = decode(&zeros).unwrap();
        assert!(img.pixels().iter().all(|p| (p - 0.5).abs() < 1e-15));

        let extreme = LatentState {
            values: vec![1e12; 4],
            ..zeros.clone()
        };
        assert!(decode(&extreme).unwrap().pixels().iter().all(|p| *p == 1.0));

        let ordered = LatentState {
            values: vec![-0.9, -0.1, 0.3, 0.8],
            ..zeros.clone()
        };
        let px = decode(&ordered).unwrap();
        for w in px.pixels().windows(2) {
            assert!(w[0] < w[1]);
        }
        // encode round-trips in-range latents.
        let back = encode(&px);
        for (a, b) in back.values.iter().zip(&ordered.values) {
            assert!((a - b).abs() < 1e-12);
        }

        let nonzero = LatentState {
            timestep: 3,
            ..zeros
        };
        assert!(matches!(
            decode(&nonzero),
            Err(PolicyError::NonzeroTimestep { timestep: 3 })
        ));
    }

    #[test]
    fn img2img_step_counts_follow_rounding_rule() {
        let policy = DenoisingPolicy::identity(identity_cfg(10));
        let img = Image::new(1, 8, 8, vec![0.5; 64]).unwrap();
        let half = policy.img2img_trajectory(&ctx(8), &img, 0.5, 3).unwrap();
        assert_eq!(half.step_log_probs.len(), 5);
        assert_eq!(half.start_timestep(), 5);
        assert_eq!(half.final_state().timestep, 0);
        // Degenerate strengths floor at one denoise step.
        let tiny = policy.img2img_trajectory(&ctx(8), &img, 1e-6, 3).unwrap();
        assert_eq!(tiny.step_log_probs.len(), 1);
        for s in [0.0, -0.5, 1.5] {
            assert!(matches!(
                policy.img2img_trajectory(&ctx(8), &img, s, 3),
                Err(PolicyError::StrengthOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn img2img_full_strength_forgets_the_input() {
        let policy = DenoisingPolicy::identity(identity_cfg(10));
        let bright = Image::new(1, 8, 8, vec![1.0; 64]).unwrap();
        let traj = policy.img2img_trajectory(&ctx(8), &bright, 1.0, 11).unwrap();
        assert_eq!(traj.start_timestep(), 10);
        // Starting latent should look like near-standard noise, not the
        // all-ones input: mean near 0, variance near 1.
        let vals = &traj.states[0].values;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.5, "mean {mean}");
        assert!((0.4..2.5).contains(&var), "var {var}");
    }

    #[test]
    fn context_dimension_checked() {
        let policy = DenoisingPolicy::identity(identity_cfg(2));
        let bad = PromptContext {
            text: String::new(),
            embedding: vec![0.0; 3],
            tag: PromptTag::Unknown,
        };
        assert!(matches!(
            policy.sample_trajectory(&bad, 0),
            Err(PolicyError::ContextDimension { .. })
        ));
    }

    #[test]
    fn divergent_mean_is_reported_with_timestep() {
        let cfg = PolicyConfig {
            num_steps: 3,
            ..PolicyConfig::default()
        };
        let d = cfg.latent_dim();
        let f = cfg.feature_dim();
        let policy =
            DenoisingPolicy::from_dense(cfg, vec![f32::INFINITY; d * f], vec![0.0; d]).unwrap();
        match policy.sample_trajectory(&ctx(8), 0) {
            Err(PolicyError::Divergence { timestep }) => assert_eq!(timestep, 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_central_differences_quick() {
        // Small smoke version of the full finite-difference acceptance run.
        let mut rng = stream_rng(5150, 0);
        for case in 0..10 {
            let cfg = PolicyConfig {
                channels: 1,
                height: 3,
                width: 3,
                num_steps: 4,
                sigma_first: 0.4,
                sigma_last: 1.1,
                context_dim: 3,
                step_scale: 0.8,
            };
            let d = cfg.latent_dim();
            let f = cfg.feature_dim();
            let weight: Vec<f32> = (0..d * f).map(|_| rng.gen_range(-0.3f32..0.3)).collect();
            let bias: Vec<f32> = (0..d).map(|_| rng.gen_range(-0.2f32..0.2)).collect();
            let mut policy = DenoisingPolicy::from_dense(cfg.clone(), weight, bias).unwrap();
            if case % 2 == 1 {
                policy.enable_lora(2, 2.0, rng.gen()).unwrap();
                let n = policy.trainable_len();
                let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
                let mut p = policy.trainable_read();
                for (pv, nv) in p.iter_mut().zip(&noise) {
                    *pv += nv;
                }
                policy.trainable_write(&p);
            }
            let context = PromptContext {
                text: String::new(),
                embedding: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                tag: PromptTag::Unknown,
            };
            let x_t = LatentState {
                channels: 1,
                height: 3,
                width: 3,
                values: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                timestep: 2,
            };
            let x_prev = LatentState {
                values: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                timestep: 1,
                ..x_t.clone()
            };
            let (_, grad) = policy.log_prob_with_grad(&x_t, &x_prev, &context).unwrap();
            let params = policy.trainable_read();
            let h = 1e-4;
            let mut err_sq = 0.0;
            let mut norm_sq = 0.0;
            for i in (0..params.len()).step_by(7) {
                let mut plus = policy.clone();
                let mut minus = policy.clone();
                let mut pp = params.clone();
                pp[i] += h;
                plus.trainable_write(&pp);
                pp[i] = params[i] - h;
                minus.trainable_write(&pp);
                // Use the realized f32 perturbation as the denominator.
                let realized = plus.trainable_read()[i] - minus.trainable_read()[i];
                let fp = plus.log_prob(&x_t, &x_prev, &context).unwrap();
                let fm = minus.log_prob(&x_t, &x_prev, &context).unwrap();
                let fd = (fp - fm) / realized;
                err_sq += (grad[i] - fd) * (grad[i] - fd);
                norm_sq += fd * fd;
            }
            assert!(
                err_sq.sqrt() <= 1e-3 * norm_sq.sqrt().max(1e-9),
                "case {case}: fd relative error too large"
            );
        }
    }
}
