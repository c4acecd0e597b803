//! AdamW with decoupled weight decay and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    /// Cosine annealing from the base rate to `min_lr` over the stage.
    Cosine,
    /// `base * (1 - t / T)^power`.
    Poly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleKind,
    pub min_lr: f64,
    pub poly_power: f64,
    /// Micro-batches whose gradients are summed before each update.
    pub accumulate: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: ScheduleKind::Cosine,
            min_lr: 0.0,
            poly_power: 0.9,
            accumulate: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.weight_decay, self.eps, self.min_lr, self.poly_power];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("optimizer rates must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if self.accumulate == 0 {
            return Err(Error::config("accumulate must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate of update `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let t = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
        match self.schedule {
            ScheduleKind::Constant => self.lr,
            ScheduleKind::Cosine => self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()),
            ScheduleKind::Poly => self.lr * (1.0 - t).powf(self.poly_power),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Moments are allocated lazily, only for trainable tensors that received a
/// gradient, and keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update with the gradients accumulated in `store`:
    /// `p <- p - lr wd p - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.trainable().filter(|&id| store.get(id).touched).collect();
        for &id in &ids {
            let p = store.get(id);
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at entry {i} (step {})",
                    p.name,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for id in ids {
            let (name, grad) = {
                let p = store.get(id);
                (p.name.clone(), p.grad.clone())
            };
            let (r, c) = grad.dims();
            let mom = self.state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            });
            let value = store.value_mut(id);
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (((w, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * wd * *w;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
