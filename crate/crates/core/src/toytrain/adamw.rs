//! AdamW with global-norm clipping and a warmup-then-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, peak_lr: 2e-4, min_lr: 2e-5, warmup_frac: 0.01, weight_decay: 0.1, grad_clip: 1.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.peak_lr > 0.0
            && self.min_lr > 0.0
            && self.min_lr <= self.peak_lr
            && self.warmup_frac > 0.0
            && self.warmup_frac < 1.0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Linear warmup to `peak_lr` over `ceil(warmup_frac * total)` steps, then
/// cosine decay to `min_lr` at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(cfg: &AdamWConfig, total_steps: usize) -> Self {
        let warmup_steps = ((cfg.warmup_frac * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1));
        Self { total_steps, warmup_steps, peak_lr: cfg.peak_lr, min_lr: cfg.min_lr }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<T>,
    v: Vec<T>,
    /// Whether weight decay applies to each parameter.
    decay: Vec<bool>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    /// Weight decay applies to the `(start, len)` ranges in `decayed` only.
    pub fn new(cfg: AdamWConfig, n_params: usize, decayed: &[(usize, usize)]) -> Self {
        let mut decay = vec![false; n_params];
        for &(s, n) in decayed {
            decay[s..s + n].fill(true);
        }
        Self { cfg, m: vec![T::zero(); n_params], v: vec![T::zero(); n_params], decay, t: 0 }
    }

    /// Clips `grad` to the configured global norm, takes one step at `lr`
    /// and returns the pre-clip norm.
    pub fn step(&mut self, params: &mut [T], grad: &mut [T], lr: f64) -> T {
        let norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
        let clip = T::of(self.cfg.grad_clip);
        if norm > clip {
            let s = clip / norm;
            grad.iter_mut().for_each(|g| *g = *g * s);
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, wd, eps) = (T::of(lr), T::of(self.cfg.weight_decay), T::of(self.cfg.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
            if self.decay[i] {
                params[i] = params[i] - lr * wd * params[i];
            }
            params[i] = params[i] - lr * update;
        }
        norm
    }
}
