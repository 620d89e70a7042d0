//! SGD with momentum and decoupled step decay of the learning rate.
//!
//! Update per parameter, with `g = grad + weight_decay * w`:
//! `buf = momentum * buf + g` (`buf = g` on the first step), `w -= lr * buf`.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelState;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `gamma` every `decay_every` steps;
    /// 0 disables decay.
    pub decay_every: u64,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_every: 1000,
            gamma: 0.95,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.gamma.is_finite()
            && self.gamma > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_every == 0 {
            self.lr
        } else {
            self.lr * self.gamma.powi((step / self.decay_every) as i32)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub momentum: BTreeMap<String, Tensor>,
    pub steps: u64,
}

/// Applies one update to every trainable parameter that received a gradient.
/// Returns the global gradient norm before clipping.
pub fn sgd_step(state: &mut ModelState, grads: &GradStore, cfg: &OptimizerConfig, grad_clip: Option<f64>) -> Result<f64> {
    let lr = cfg.lr_at(state.optimizer.steps);
    let mut with_grad = Vec::new();
    let mut sq = 0.0;
    for (name, var) in state.trainable() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += crate::ops::scalar(&g.sqr()?.sum_all()?)?;
            with_grad.push((name.to_string(), var.clone(), g.clone()));
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::InvalidInput("non-finite gradient".into()));
    }
    let clip_scale = match grad_clip {
        Some(c) if norm > c && norm > 0.0 => c / norm,
        _ => 1.0,
    };
    for (name, var, g) in with_grad {
        let w = var.as_tensor();
        let mut g = if clip_scale != 1.0 { (g * clip_scale)? } else { g };
        if cfg.weight_decay != 0.0 {
            g = (g + (w * cfg.weight_decay)?)?;
        }
        let buf = match state.optimizer.momentum.get(&name) {
            Some(prev) if cfg.momentum != 0.0 => ((prev * cfg.momentum)? + g)?,
            _ => g,
        };
        var.set(&(w - (&buf * lr)?)?)?;
        state.optimizer.momentum.insert(name, buf.detach());
    }
    state.optimizer.steps += 1;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let c = OptimizerConfig {
            lr: 1.0,
            decay_every: 10,
            gamma: 0.5,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert_eq!(c.lr_at(9), 1.0);
        assert_eq!(c.lr_at(10), 0.5);
        assert_eq!(c.lr_at(25), 0.25);
    }
}
