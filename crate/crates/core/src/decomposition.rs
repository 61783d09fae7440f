//! Decomposed convolutions: a `C_in → C_out, k×k` layer replaced by
//!
//! ```text
//! C_in      → C_out/Z, 1×1   (reduce)
//! C_out/Z   → C_out/Z, k×k   (core, carries stride and padding)
//! C_out/Z   → C_out,   1×1   (expand)
//! ```
//!
//! with no normalization or non-linearity in between. The block is trained from scratch.

use crate::damping::{damped_conv2d, damped_conv2d_backward, DampingMatrix};
use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompSpec {
    pub enabled: bool,
    #[serde(rename = "Z", alias = "z")]
    pub z: usize,
}

impl Default for DecompSpec {
    fn default() -> Self {
        Self { enabled: false, z: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedBlock {
    pub reduce: ConvLayer,
    pub core: ConvLayer,
    pub expand: ConvLayer,
}

/// Stride-1, "same"-padded decomposition of a `k×k` convolution.
pub fn decompose_layer(c_in: usize, c_out: usize, k: usize, z: usize) -> Result<DecomposedBlock> {
    decompose_conv(c_in, c_out, (k, k), (1, 1), ((k - 1) / 2, (k - 1) / 2), z)
}

pub fn decompose_conv(
    c_in: usize,
    c_out: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    z: usize,
) -> Result<DecomposedBlock> {
    let mid = bottleneck_width(c_out, z)?;
    Ok(DecomposedBlock {
        reduce: ConvLayer::same(c_in, mid, (1, 1)),
        core: ConvLayer::new(mid, mid, kernel, stride, padding),
        expand: ConvLayer::same(mid, c_out, (1, 1)),
    })
}

fn bottleneck_width(c_out: usize, z: usize) -> Result<usize> {
    if z == 0 {
        return Err(Error::Config("compression factor Z must be >= 1".into()));
    }
    if !c_out.is_multiple_of(z) {
        return Err(Error::Config(format!("C_out = {c_out} is not divisible by Z = {z}")));
    }
    Ok(c_out / z)
}

/// `C_in·(C_out/Z) + (C_out/Z)²·k² + (C_out/Z)·C_out`, plus `2·C_out/Z + C_out` biases
/// when requested.
pub fn decomp_param_count(c_in: usize, c_out: usize, k: usize, z: usize, include_bias: bool) -> Result<usize> {
    let m = bottleneck_width(c_out, z)?;
    let weights = c_in * m + m * m * k * k + m * c_out;
    Ok(if include_bias { weights + m + m + c_out } else { weights })
}

/// Weight count of the undecomposed `C_in → C_out, k×k` layer.
pub fn conv_weight_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k
}

/// Intermediate activations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct DecompCache {
    input: Tensor,
    reduced: Tensor,
    cored: Tensor,
}

pub struct DecompGrads {
    pub input: Tensor,
    pub reduce: ConvGrads,
    pub core: ConvGrads,
    pub expand: ConvGrads,
}

impl DecomposedBlock {
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.reduce.init(rng);
        self.core.init(rng);
        self.expand.init(rng);
    }

    pub fn parameter_count(&self) -> usize {
        self.reduce.parameter_count() + self.core.parameter_count() + self.expand.parameter_count()
    }

    pub fn weight_count(&self) -> usize {
        self.reduce.weight.numel() + self.core.weight.numel() + self.expand.weight.numel()
    }

    pub fn layers(&self) -> [&ConvLayer; 3] {
        [&self.reduce, &self.core, &self.expand]
    }

    pub fn forward(&self, input: &Tensor, damping: Option<&DampingMatrix>) -> Result<(Tensor, DecompCache)> {
        let reduced = conv2d_forward(input, &self.reduce)?;
        let cored = match damping {
            Some(c) => damped_conv2d(&reduced, &self.core, c)?,
            None => conv2d_forward(&reduced, &self.core)?,
        };
        let out = conv2d_forward(&cored, &self.expand)?;
        Ok((out, DecompCache { input: input.clone(), reduced, cored }))
    }

    pub fn backward(&self, grad_out: &Tensor, cache: &DecompCache, damping: Option<&DampingMatrix>) -> Result<DecompGrads> {
        let expand = conv2d_backward(grad_out, Some(&cache.cored), &self.expand)?;
        let core = match damping {
            Some(c) => damped_conv2d_backward(&expand.input, Some(&cache.reduced), &self.core, c)?,
            None => conv2d_backward(&expand.input, Some(&cache.reduced), &self.core)?,
        };
        let reduce = conv2d_backward(&core.input, Some(&cache.input), &self.reduce)?;
        Ok(DecompGrads { input: reduce.input.clone(), reduce, core, expand })
    }
}

/// reduce → damped core → expand.
pub fn damped_decomposed_forward(input: &Tensor, block: &DecomposedBlock, c: &DampingMatrix) -> Result<Tensor> {
    Ok(block.forward(input, Some(c))?.0)
}
