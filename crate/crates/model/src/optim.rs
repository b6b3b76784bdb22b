//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::NamedParam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.02,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<NamedParam>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl AdamW {
    pub fn new(params: Vec<NamedParam>, cfg: AdamWConfig) -> Result<Self> {
        let zeros = |p: &NamedParam| p.var.as_tensor().zeros_like();
        let m = params.iter().map(zeros).collect::<candle_core::Result<_>>()?;
        let v = params.iter().map(zeros).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            cfg,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. Parameters without a gradient are treated as having a zero
    /// gradient, so only their decay applies.
    ///
    /// `p <- p * (1 - lr * wd)` (decay-flagged parameters only), then
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (i, p) in self.params.iter().enumerate() {
            let theta = p.var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => g.clone(),
                None => theta.zeros_like()?,
            };
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let decayed = if p.decay {
                (theta * (1.0 - lr * weight_decay))?
            } else {
                theta.clone()
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let next = (decayed - (update * lr)?)?.detach();
            p.var.set(&next)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2` for `0 <= t <= T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if t > total {
        return Err(config_err(format!("schedule step {t} beyond total {total}")));
    }
    if t == 0 || total == 0 {
        return Ok(lr0);
    }
    if t == total {
        return Ok(lr_min);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}
