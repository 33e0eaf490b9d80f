//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Frozen parameters are skipped;
    /// parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.get_mut(id).data_mut();
            for j in 0..theta.len() {
                let g = grad.map_or(0.0, |g| g.data()[j]) as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as Float;
                v[j] = vj as Float;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let th = theta[j] as f64;
                theta[j] = (th - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * th)) as Float;
            }
        }
    }
}

/// Linear warmup followed by cosine annealing to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Validation(format!(
                "warmup ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Validation("total_steps must be positive".into()));
        }
        Ok(())
    }

    /// Whole number of warmup steps (`round(ratio * total)`).
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.peak_lr * step as f64 / warmup as f64);
        }
        let span = (self.total_steps - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        Ok(self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
