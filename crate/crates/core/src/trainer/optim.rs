use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::ParamRole;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
}

/// SGD with momentum under a cosine learning-rate schedule. Without an
/// explicit `learning_rate`, the base rate is `base_lr * batch_size / 256`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, base_lr: 0.03, learning_rate: None, weight_decay: 5e-4, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let lr = self.learning_rate.unwrap_or(self.base_lr);
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::validation(format!("{prefix}.learning_rate"), "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation(format!("{prefix}.weight_decay"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("{prefix}.momentum"), "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn peak_lr(&self, batch_size: usize) -> f64 {
        self.learning_rate.unwrap_or(self.base_lr * batch_size as f64 / 256.0)
    }
}

pub fn cosine_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let t = (step as f64 / total_steps as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: &OptimizerConfig) -> Self {
        Sgd { momentum: config.momentum as f32, weight_decay: config.weight_decay as f32, velocity: Vec::new() }
    }

    /// `v = mu * v + (g + wd * w)`, `w -= lr * v`; decay applies to
    /// weight matrices and kernels only.
    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.step_scaled(model, lr, |_| 1.0);
    }

    /// Like [`Sgd::step`] with a per-parameter learning-rate multiplier
    /// chosen by parameter name.
    pub fn step_scaled(&mut self, model: &mut Model, lr: f64, scale: impl Fn(&str) -> f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut i = 0;
        model.visit_params_mut(&mut |p| {
            if p.role == ParamRole::Buffer {
                return;
            }
            if velocity.len() <= i {
                velocity.push(vec![0.0; p.numel()]);
            }
            let v = &mut velocity[i];
            let decay = if p.role == ParamRole::Weight { wd } else { 0.0 };
            let lr = (lr * scale(&p.name)) as f32;
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = mu * *v + g + decay * *w;
                *w -= lr * *v;
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn linear_scaling() {
        let c = OptimizerConfig::default();
        assert!((c.peak_lr(256) - 0.03).abs() < 1e-15);
        assert!((c.peak_lr(64) - 0.0075).abs() < 1e-15);
        assert_eq!(OptimizerConfig { learning_rate: Some(0.2), ..c }.peak_lr(64), 0.2);
    }
}
