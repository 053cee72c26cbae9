use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{c, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW with decoupled weight decay:
///
/// ```text
/// θ ← θ − lr·λ·θ
/// m ← β1·m + (1 − β1)·g,   v ← β2·v + (1 − β2)·g²
/// θ ← θ − lr · (m / (1 − β1ᵗ)) / (sqrt(v / (1 − β2ᵗ)) + ε)
/// ```
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![T::zero(); p.data.len()]).collect();
        AdamW { config, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed shape");
        self.t += 1;
        let cfg = self.config;
        let (b1, b2): (T, T) = (c(cfg.beta1), c(cfg.beta2));
        let bc1: T = c(1.0 - Float::powi(cfg.beta1, self.t as i32));
        let bc2: T = c(1.0 - Float::powi(cfg.beta2, self.t as i32));
        let (lr_t, eps, decay): (T, T, T) = (c(lr), c(cfg.eps), c(lr * cfg.weight_decay));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                p.data[i] = p.data[i] - decay * p.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> T {
    let sq = grads.iter().flat_map(|g| g.data.iter()).fold(T::zero(), |a, &x| a + x * x);
    let norm = sq.sqrt();
    let max: T = c(max_norm);
    if norm > max {
        let s = max / (norm + c(1e-12));
        for g in grads.iter_mut() {
            for x in g.data.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}
