use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-5,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update of every parameter.
    ///
    /// Decay is applied first as `θ ← θ·(1 − lr·wd)`, then the
    /// bias-corrected moment step.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let all: Vec<ParamId> = store.ids().collect();
        self.step_subset(store, lr, &all)
    }

    /// Updates only `ids`; every other parameter, including its moments and
    /// step counter, is left untouched.
    pub fn step_subset(&self, store: &mut ParamStore, lr: f64, ids: &[ParamId]) -> Result<()> {
        let missing: Vec<String> = ids
            .iter()
            .map(|&id| store.get(id))
            .filter(|p| p.tensor.grad().is_none())
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradients(missing));
        }
        for &id in ids {
            let p = store.get_mut(id);
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let decay = 1.0 - lr * self.weight_decay;
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                values[i] *= decay;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_init` to `lr_peak`, then half-cycle cosine
/// annealing back to `lr_init` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_init: f64,
    pub lr_peak: f64,
}

impl CosineSchedule {
    pub fn new(total_steps: u64, warmup_steps: u64, lr_init: f64, lr_peak: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
            )));
        }
        if !(lr_init >= 0.0 && lr_peak > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(CosineSchedule {
            total_steps,
            warmup_steps,
            lr_init,
            lr_peak,
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::config(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.lr_init + (self.lr_peak - self.lr_init) * frac);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.lr_init + (self.lr_peak - self.lr_init) * cos)
    }
}

/// Free-function form of [`CosineSchedule::lr`].
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, lr_init: f64, lr_peak: f64) -> Result<f64> {
    CosineSchedule::new(total_steps, warmup_steps, lr_init, lr_peak)?.lr(step)
}
