use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// AdamW hyperparameters. Defaults follow the reference fine-tuning setup
/// except `lr` and `clip_norm`, which are sized for the small toy networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.eps < 0.0 {
            return Err(Error::config("weight_decay and eps must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm fed into the moment updates.
    pub applied_norm: f64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepInfo> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    /// One update at learning rate `lr` (for schedules). Gradients are
    /// clipped to the global norm bound, then the decoupled decay
    /// `p <- p (1 - lr wd)` and the bias-corrected Adam step are applied.
    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<StepInfo> {
        check_dim("optimizer params", self.m.len(), params.len())?;
        check_dim("optimizer grads", self.m.len(), grads.len())?;
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {lr}")));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradient",
                index,
            });
        }

        let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.config.clip_norm {
            Some(bound) if grad_norm > bound => bound / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let decay = 1.0 - lr * weight_decay;

        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }

        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameters after optimizer step",
                index,
            });
        }
        Ok(StepInfo {
            grad_norm,
            applied_norm: grad_norm * scale,
        })
    }
}
