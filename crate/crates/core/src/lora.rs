//! Low-rank adaptation of a frozen weight matrix.
//!
//! A `LoraLayer` keeps the pre-trained matrix `W0` untouched and trains only
//! the factors `B` (d×r, zero-initialized) and `A` (r×k, small Gaussian), so
//! the effective weight is `W0 + (alpha/r)·B·A` and equals `W0` exactly at
//! initialization. Rank must satisfy `r < min(d, k)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::stream_rng;

/// Standard deviation of the Gaussian init for factor `A`.
const A_INIT_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} out of range: must satisfy 1 <= rank < min(d={d}, k={k})")]
    RankOutOfRange { rank: usize, d: usize, k: usize },
    #[error("base matrix length {got} does not match {d}x{k}")]
    BaseShapeMismatch { got: usize, d: usize, k: usize },
    #[error("input dimension {got} does not match k={k}")]
    InputDimension { got: usize, k: usize },
}

/// Frozen base matrix plus trainable low-rank factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraLayer {
    w0: Vec<f32>,
    b: Vec<f32>,
    a: Vec<f32>,
    d: usize,
    k: usize,
    rank: usize,
    alpha: f64,
}

impl LoraLayer {
    /// Wraps `w0` (row-major d×k). `B` starts at zero so the fresh layer
    /// reproduces the base forward exactly; `A` is seeded Gaussian.
    pub fn init(
        w0: Vec<f32>,
        d: usize,
        k: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, LoraError> {
        if w0.len() != d * k {
            return Err(LoraError::BaseShapeMismatch { got: w0.len(), d, k });
        }
        if rank < 1 || rank >= d.min(k) {
            return Err(LoraError::RankOutOfRange { rank, d, k });
        }
        let mut rng = stream_rng(seed, 0);
        let a = (0..rank * k)
            .map(|_| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                (n * A_INIT_STD) as f32
            })
            .collect();
        Ok(Self {
            w0,
            b: vec![0.0; d * rank],
            a,
            d,
            k,
            rank,
            alpha,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Factor scaling `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn base(&self) -> &[f32] {
        &self.w0
    }

    pub fn factor_b(&self) -> &[f32] {
        &self.b
    }

    pub fn factor_a(&self) -> &[f32] {
        &self.a
    }

    pub(crate) fn factor_b_mut(&mut self) -> &mut [f32] {
        &mut self.b
    }

    pub(crate) fn factor_a_mut(&mut self) -> &mut [f32] {
        &mut self.a
    }

    pub(crate) fn set_factors(&mut self, b: Vec<f32>, a: Vec<f32>) -> Result<(), LoraError> {
        if b.len() != self.d * self.rank || a.len() != self.rank * self.k {
            return Err(LoraError::BaseShapeMismatch {
                got: b.len() + a.len(),
                d: self.d,
                k: self.k,
            });
        }
        self.b = b;
        self.a = a;
        Ok(())
    }

    /// Trainable parameters per adapted matrix: `r·(d+k)`.
    pub fn trainable_param_count(&self) -> usize {
        self.rank * (self.d + self.k)
    }

    /// `A·x`, the low-rank projection of the input (length r).
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, LoraError> {
        if x.len() != self.k {
            return Err(LoraError::InputDimension {
                got: x.len(),
                k: self.k,
            });
        }
        let mut ax = vec![0.0; self.rank];
        for (q, out) in ax.iter_mut().enumerate() {
            let row = &self.a[q * self.k..(q + 1) * self.k];
            *out = row
                .iter()
                .zip(x)
                .map(|(w, v)| f64::from(*w) * v)
                .sum::<f64>();
        }
        Ok(ax)
    }

    /// `W0·x + (alpha/r)·B·(A·x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, LoraError> {
        let ax = self.project(x)?;
        let s = self.scale();
        let mut y = vec![0.0; self.d];
        for (i, out) in y.iter_mut().enumerate() {
            let base_row = &self.w0[i * self.k..(i + 1) * self.k];
            let mut acc = base_row
                .iter()
                .zip(x)
                .map(|(w, v)| f64::from(*w) * v)
                .sum::<f64>();
            let b_row = &self.b[i * self.rank..(i + 1) * self.rank];
            acc += s
                * b_row
                    .iter()
                    .zip(&ax)
                    .map(|(w, v)| f64::from(*w) * v)
                    .sum::<f64>();
            *out = acc;
        }
        Ok(y)
    }

    /// Dense `W0 + (alpha/r)·B·A`; the layer itself is unchanged.
    pub fn merge(&self) -> Vec<f32> {
        let s = self.scale();
        let mut merged = vec![0.0f32; self.d * self.k];
        for i in 0..self.d {
            for j in 0..self.k {
                let mut delta = 0.0f64;
                for q in 0..self.rank {
                    delta += f64::from(self.b[i * self.rank + q]) * f64::from(self.a[q * self.k + j]);
                }
                merged[i * self.k + j] =
                    (f64::from(self.w0[i * self.k + j]) + s * delta) as f32;
            }
        }
        merged
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_forward(w: &[f32], d: usize, k: usize, x: &[f64]) -> Vec<f64> {
        (0..d)
            .map(|i| {
                w[i * k..(i + 1) * k]
                    .iter()
                    .zip(x)
                    .map(|(wv, xv)| f64::from(*wv) * xv)
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fresh_init_forward_equals_base_exactly() {
        let w0: Vec<f32> = (0..12).map(|i| (i as f32 - 5.0) * 0.3).collect();
        let layer = LoraLayer::init(w0.clone(), 3, 4, 2, 2.0, 9).unwrap();
        let x = vec![0.4, -1.2, 2.0, 0.7];
        assert_eq!(layer.forward(&x).unwrap(), dense_forward(&w0, 3, 4, &x));
    }

    #[test]
    fn rank_bounds_enforced() {
        let w0 = vec![0.0f32; 6];
        assert!(LoraLayer::init(w0.clone(), 2, 3, 2, 1.0, 0).is_err()); // rank == min(d,k)
        assert!(LoraLayer::init(w0.clone(), 2, 3, 0, 1.0, 0).is_err());
        assert!(LoraLayer::init(w0, 2, 3, 1, 1.0, 0).is_ok());
    }

    #[test]
    fn same_seed_same_factors() {
        let w0 = vec![0.0f32; 16];
        let l1 = LoraLayer::init(w0.clone(), 4, 4, 2, 2.0, 77).unwrap();
        let l2 = LoraLayer::init(w0, 4, 4, 2, 2.0, 77).unwrap();
        assert_eq!(l1.factor_a(), l2.factor_a());
    }

    #[test]
    fn hand_worked_rank_one_forward() {
        // W0 = I (2x2), B = [1, 0]^T, A = [0, 1], alpha = r = 1, x = [0, 1]^T.
        // (W0 + BA)·x = [1, 1]^T.
        let mut layer = LoraLayer::init(vec![1.0, 0.0, 0.0, 1.0], 2, 2, 1, 1.0, 0).unwrap();
        layer.set_factors(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let y = layer.forward(&[0.0, 1.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!((y[1] - 1.0).abs() < 1e-12);
        // Merged-dense forward agrees.
        let merged = layer.merge();
        let dense = dense_forward(&merged, 2, 2, &[0.0, 1.0]);
        assert!((dense[0] - y[0]).abs() <= 1e-6 && (dense[1] - y[1]).abs() <= 1e-6);
    }

    #[test]
    fn merge_of_fresh_init_is_base_and_idempotent() {
        let w0: Vec<f32> = (0..20).map(|i| (i as f32).sin()).collect();
        let layer = LoraLayer::init(w0.clone(), 4, 5, 3, 3.0, 5).unwrap();
        assert_eq!(layer.merge(), w0);
        assert_eq!(layer.merge(), layer.merge());
    }

    #[test]
    fn merge_equivalence_on_random_layers() {
        let mut rng = stream_rng(31, 0);
        for _ in 0..20 {
            let (d, k, r) = (6, 5, 2);
            let w0: Vec<f32> = (0..d * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mut layer = LoraLayer::init(w0, d, k, r, 4.0, rng.gen()).unwrap();
            let b: Vec<f32> = (0..d * r).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
            let a: Vec<f32> = (0..r * k).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
            layer.set_factors(b, a).unwrap();
            let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let factored = layer.forward(&x).unwrap();
            let dense = dense_forward(&layer.merge(), d, k, &x);
            for (f, m) in factored.iter().zip(&dense) {
                assert!((f - m).abs() <= 1e-6, "merge mismatch: {f} vs {m}");
            }
        }
    }

    #[test]
    fn input_dimension_checked() {
        let layer = LoraLayer::init(vec![0.0; 6], 2, 3, 1, 1.0, 0).unwrap();
        assert!(layer.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn parameter_count() {
        let layer = LoraLayer::init(vec![0.0; 64 * 73], 64, 73, 4, 4.0, 0).unwrap();
        assert_eq!(layer.trainable_param_count(), 4 * (64 + 73));
    }
}
