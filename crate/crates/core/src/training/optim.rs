use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Linear warmup length in steps.
    pub warmup: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, batch_size: 16, grad_clip: 1.0, warmup: 100 }
    }
}

impl OptimizerConfig {
    /// Reference values of the full-scale setup.
    pub fn full_scale() -> Self {
        Self { lr: 4.5e-6, batch_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be finite and nonnegative"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(Error::config("optim.beta1", "must lie in (0, 1)"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("optim.beta2", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("optim.grad_clip", "must be nonnegative"));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step` under linear warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup as f64
        }
    }
}

/// AdamW with decoupled weight decay applied to matrices only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            t: 0,
        }
    }

    /// One update with `grads`; parameters without a gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(cfg.eps);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (c1, c2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let decay = T::of(lr * cfg.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            let is_matrix = p.value.shape().len() == 2 && p.value.shape().iter().all(|&d| d > 1);
            let data = p.value.data_mut();
            if is_matrix && cfg.weight_decay > 0.0 {
                for x in data.iter_mut() {
                    *x -= decay * *x;
                }
            }
            let Some(g) = grads.grads.get(i).and_then(|g| g.as_deref()) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                m[j] = b1t * m[j] + c1 * g[j];
                v[j] = b2t * v[j] + c2 * g[j] * g[j];
                data[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}
