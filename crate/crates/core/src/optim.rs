//! AdamW with decoupled weight decay.
//!
//! For parameter `theta` with gradient `g` at step `t` (1-based):
//!
//! ```text
//! theta <- theta * (1 - lr * wd)
//! m     <- b1 m + (1 - b1) g
//! v     <- b2 v + (1 - b2) g^2
//! theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use crate::error::{LabError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            lr_scale: vec![1.0; shapes.len()],
        }
    }

    /// Multiplies the learning rate of tensor `i` by `scale`.
    pub fn set_lr_scale(&mut self, i: usize, scale: f64) {
        self.lr_scale[i] = scale;
    }

    pub fn for_params(cfg: AdamWConfig, params: &[&mut Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(LabError::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(LabError::dim("adamw", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = lr * self.lr_scale[i];
            for (j, (x, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *x *= 1.0 - lr * c.weight_decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gr;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gr * gr;
                *x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Step schedule: `lr` until `decay_at`, then `lr * factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub lr: f64,
    pub decay_at: usize,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.decay_at {
            self.lr * self.factor
        } else {
            self.lr
        }
    }
}
