//! Per-channel batch normalization over `[N, C, T, F]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]).into_param(),
            shift: Tensor::zeros(&[channels]).into_param(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    pub fn parameter_count(&self) -> usize {
        self.scale.numel() + self.shift.numel()
    }

    pub fn reset(&mut self) {
        self.scale.data_mut().fill(1.0);
        self.shift.data_mut().fill(0.0);
        self.running_mean.data_mut().fill(0.0);
        self.running_var.data_mut().fill(1.0);
    }
}

/// Train mode normalizes with batch statistics and updates the running estimates; eval mode
/// uses the running estimates. Variance is clamped by `eps`, so constant channels are safe.
pub fn batchnorm2d(input: &Tensor, bn: &mut BatchNorm2d, mode: Mode) -> Result<(Tensor, BnCache)> {
    let (n, c, t, f) = input.dims4()?;
    if c != bn.channels() {
        return Err(Error::dim(format!(
            "batchnorm over {c} channels (input {:?}) but stats hold {}",
            input.shape(),
            bn.channels()
        )));
    }
    let hw = t * f;
    let count = n * hw;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for (i, plane) in input.data().chunks_exact(hw).enumerate() {
                mean[i % c] += plane.iter().map(|v| *v as f64).sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for (i, plane) in input.data().chunks_exact(hw).enumerate() {
                let m = mean[i % c];
                var[i % c] += plane.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let mom = bn.momentum as f64;
            for ch in 0..c {
                let rm = &mut bn.running_mean.data_mut()[ch];
                *rm = ((1.0 - mom) * *rm as f64 + mom * mean[ch]) as f32;
                let rv = &mut bn.running_var.data_mut()[ch];
                *rv = ((1.0 - mom) * *rv as f64 + mom * var[ch] * unbiased) as f32;
            }
            (
                mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
            )
        }
        Mode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v.max(0.0) + bn.eps).sqrt()).collect();
    let mut x_hat = input.clone();
    let mut out = input.clone();
    for (i, (xh, y)) in x_hat.data_mut().chunks_exact_mut(hw).zip(out.data_mut().chunks_exact_mut(hw)).enumerate() {
        let ch = i % c;
        let (m, s) = (mean[ch], inv_std[ch]);
        let (g, b) = (bn.scale.data()[ch], bn.shift.data()[ch]);
        for (a, o) in xh.iter_mut().zip(y.iter_mut()) {
            *a = (*a - m) * s;
            *o = *a * g + b;
        }
    }
    Ok((out, BnCache { x_hat, inv_std, mode }))
}

pub struct BnGrads {
    pub input: Tensor,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

pub fn batchnorm2d_backward(grad_out: &Tensor, cache: &BnCache, bn: &BatchNorm2d) -> Result<BnGrads> {
    grad_out.same_shape(&cache.x_hat, "batchnorm backward")?;
    let (n, c, t, f) = grad_out.dims4()?;
    let hw = t * f;
    let count = (n * hw) as f32;
    let mut g_scale = vec![0.0f32; c];
    let mut g_shift = vec![0.0f32; c];
    for (i, (g, xh)) in grad_out.data().chunks_exact(hw).zip(cache.x_hat.data().chunks_exact(hw)).enumerate() {
        let ch = i % c;
        g_shift[ch] += g.iter().sum::<f32>();
        g_scale[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
    }
    let mut gx = grad_out.clone();
    for (i, (d, xh)) in gx.data_mut().chunks_exact_mut(hw).zip(cache.x_hat.data().chunks_exact(hw)).enumerate() {
        let ch = i % c;
        let k = bn.scale.data()[ch] * cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                let (mg, mgx) = (g_shift[ch] / count, g_scale[ch] / count);
                for (v, x) in d.iter_mut().zip(xh) {
                    *v = k * (*v - mg - x * mgx);
                }
            }
            Mode::Eval => d.iter_mut().for_each(|v| *v *= k),
        }
    }
    Ok(BnGrads { input: gx, scale: g_scale, shift: g_shift })
}
