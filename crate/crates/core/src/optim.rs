//! AdamW with decoupled weight decay. Moment state lives beside each
//! parameter; `weight_decay = 0` recovers plain Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }

    /// Plain Adam: decoupled decay disabled.
    pub fn adam(lr: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        }
    }
}

/// Optimizer state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, param_len: usize) -> Self {
        AdamW {
            config,
            step: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update in place. Rejects non-finite gradients.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step".to_string(),
                detail: format!(
                    "state {} vs param {} vs grad {}",
                    self.m.len(),
                    param.len(),
                    grad.len()
                ),
            });
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                context: "adamw gradient".to_string(),
            });
        }
        self.step += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grad.data()[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            data[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[i]);
        }
        Ok(())
    }
}
