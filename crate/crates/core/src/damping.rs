//! Frequency damping: convolution weights are multiplied element-wise by a fixed matrix
//! `C` that is 1 at the kernel center and decays linearly to `λ` at the kernel edge along
//! the damped axis. The layer computes `(W ⊙ C) * x + b`; `W` is stored undamped and `C`
//! never receives a gradient. Parameter counts are unchanged.

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward_raw, conv2d_forward_raw, ConvGrads, ConvLayer};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DampAxis {
    #[default]
    Frequency,
    Time,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DampingSpec {
    pub enabled: bool,
    pub lambda: f32,
    pub axis: DampAxis,
}

impl Default for DampingSpec {
    fn default() -> Self {
        Self { enabled: false, lambda: 0.1, axis: DampAxis::Frequency }
    }
}

impl DampingSpec {
    pub fn frequency(lambda: f32) -> Self {
        Self { enabled: true, lambda, axis: DampAxis::Frequency }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("damping.lambda = {} must lie in (0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Constant `[k_t, k_f]` multiplier for one kernel shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingMatrix {
    kt: usize,
    kf: usize,
    values: Vec<f32>,
}

/// `1 - (1 - λ) * d / d_max` for offsets `d` from the center; a length-1 axis yields `[1]`.
fn linear_profile(k: usize, lambda: f32) -> Vec<f32> {
    let half = (k - 1) / 2;
    if half == 0 {
        return vec![1.0; k];
    }
    (0..k)
        .map(|i| {
            // In f64 so the edge lands exactly on λ.
            let d = i.abs_diff(half) as f64 / half as f64;
            let l = lambda as f64;
            (l + (1.0 - l) * (1.0 - d)) as f32
        })
        .collect()
}

pub fn build_damping_matrix(kt: usize, kf: usize, spec: &DampingSpec) -> Result<DampingMatrix> {
    spec.validate()?;
    if kt == 0 || kf == 0 || kt.is_multiple_of(2) || kf.is_multiple_of(2) {
        return Err(Error::invalid(format!("damping needs odd kernel sizes, got {kt}x{kf}")));
    }
    let ones_t = vec![1.0; kt];
    let ones_f = vec![1.0; kf];
    let (pt, pf) = if !spec.enabled {
        (ones_t, ones_f)
    } else {
        match spec.axis {
            DampAxis::Frequency => (ones_t, linear_profile(kf, spec.lambda)),
            DampAxis::Time => (linear_profile(kt, spec.lambda), ones_f),
            DampAxis::Both => (linear_profile(kt, spec.lambda), linear_profile(kf, spec.lambda)),
        }
    };
    // Taking the smaller factor keeps the floor at λ when both axes are damped.
    let values = pt.iter().flat_map(|a| pf.iter().map(move |b| a.min(*b))).collect();
    Ok(DampingMatrix { kt, kf, values })
}

impl DampingMatrix {
    pub fn identity(kt: usize, kf: usize) -> Self {
        Self { kt, kf, values: vec![1.0; kt * kf] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.kt, self.kf)
    }

    /// Row-major `[k_t, k_f]`.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, t: usize, f: usize) -> f32 {
        self.values[t * self.kf + f]
    }

    /// Row through the kernel center, along frequency.
    pub fn frequency_profile(&self) -> Vec<f32> {
        let c = (self.kt - 1) / 2;
        self.values[c * self.kf..(c + 1) * self.kf].to_vec()
    }

    pub fn time_profile(&self) -> Vec<f32> {
        let c = (self.kf - 1) / 2;
        (0..self.kt).map(|t| self.at(t, c)).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|v| *v == 1.0)
    }

    fn check(&self, layer: &ConvLayer) -> Result<()> {
        if layer.kernel() != (self.kt, self.kf) {
            return Err(Error::dim(format!(
                "damping matrix {}x{} does not match kernel of weight {:?}",
                self.kt,
                self.kf,
                layer.weight.shape()
            )));
        }
        Ok(())
    }

    /// `W ⊙ C`, broadcasting `C` over the two channel dimensions.
    pub fn apply(&self, weight: &[f32]) -> Vec<f32> {
        let k = self.values.len();
        weight.chunks_exact(k).flat_map(|w| w.iter().zip(&self.values).map(|(a, c)| a * c)).collect()
    }
}

pub fn damped_conv2d(input: &Tensor, layer: &ConvLayer, c: &DampingMatrix) -> Result<Tensor> {
    c.check(layer)?;
    let w = c.apply(layer.weight.data());
    conv2d_forward_raw(input, &w, layer.bias.data(), layer.shape())
}

/// Backward of [`damped_conv2d`]: the input gradient flows through `W ⊙ C` and the weight
/// gradient is the plain one multiplied by `C`.
pub fn damped_conv2d_backward(
    grad_out: &Tensor,
    saved_input: Option<&Tensor>,
    layer: &ConvLayer,
    c: &DampingMatrix,
) -> Result<ConvGrads> {
    c.check(layer)?;
    let input = saved_input.ok_or_else(|| Error::State("damped conv backward called without a saved input".into()))?;
    let w = c.apply(layer.weight.data());
    let mut grads = conv2d_backward_raw(grad_out, input, &w, layer.shape())?;
    grads.weight = c.apply(&grads.weight);
    Ok(grads)
}
