//! Adam with bias correction, and learning-rate schedules.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::ParamTensors;
use crate::error::{invalid, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

/// Warmup schedule `d^-0.5 * min(s^-0.5, s * w^-1.5)`: linear increase for
/// `w` steps, then inverse square-root decay. `step` is clamped to at least 1.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    Noam { d_model: usize, warmup: u64 },
}

impl LrSchedule {
    /// Learning rate for the 1-based optimizer step.
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Noam { d_model, warmup } => noam_lr(step, d_model, warmup),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } if !(lr.is_finite() && lr > 0.0) => {
                invalid(format!("learning rate must be positive, got {lr}"))
            }
            LrSchedule::Noam { d_model: 0, .. } => invalid("noam schedule needs d_model > 0"),
            _ => Ok(()),
        }
    }
}

/// Adam state: first and second moments in the parameter set's tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &dyn ParamTensors) -> Adam {
        let zeros: Vec<ArrayD<f64>> = params.named().iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Adam { beta1: BETA1, beta2: BETA2, eps: EPSILON, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Apply one bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut dyn ParamTensors, grads: &dyn ParamTensors, lr: f64) -> Result<()> {
        let gs = grads.named();
        let mut ps = params.named_mut();
        if gs.len() != ps.len() || ps.len() != self.m.len() {
            return invalid("Adam: parameter, gradient and moment counts differ");
        }
        for (((_, p), (_, g)), m) in ps.iter().zip(&gs).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return invalid("Adam: tensor shapes differ");
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (((_, p), (_, g)), (m, v)) in ps.iter_mut().zip(&gs).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::update`].
pub fn adam_step(params: &mut dyn ParamTensors, grads: &dyn ParamTensors, opt: &mut Adam, lr: f64) -> Result<()> {
    opt.update(params, grads, lr)
}
