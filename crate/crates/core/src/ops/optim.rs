//! Momentum SGD and the learning-rate schedule shared by all training variants.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Updates one named parameter in place from its accumulated gradient.
    pub fn step(&mut self, name: &str, param: &mut Tensor, lr: f32) -> Result<()> {
        let n = param.numel();
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let (data, grad) = param.data_and_grad_mut();
        let grad = grad.ok_or_else(|| Error::State(format!("parameter `{name}` has no gradient buffer")))?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter `{name}` at index {i} is {}", grad[i])));
        }
        for ((p, g), v) in data.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
            let d = *g + wd * *p;
            *v = momentum * *v + d;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Functional form of a single step over parallel slices of parameters, gradients and
/// velocity buffers.
pub fn sgd_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    velocity: &mut [Vec<f32>],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim("sgd_step: params, grads and velocity differ in count"));
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(velocity.iter_mut()).enumerate() {
        if p.len() != g.len() {
            return Err(Error::dim(format!("sgd_step: parameter {i} has {} values but {} grads", p.len(), g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        if v.len() != p.len() {
            *v = vec![0.0; p.len()];
        }
        for ((pv, gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vv = momentum * *vv + *gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Linear warmup over `warmup_epochs`, then multiply by `decay` every `step_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lr: f32,
    pub warmup_epochs: usize,
    pub step_epochs: usize,
    pub decay: f32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr: 0.05, warmup_epochs: 3, step_epochs: 40, decay: 0.1 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f32 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f32 / self.warmup_epochs as f32;
        }
        if self.step_epochs == 0 {
            return self.lr;
        }
        let steps = (epoch - self.warmup_epochs) / self.step_epochs;
        self.lr * self.decay.powi(steps as i32)
    }
}
