//! Theoretical receptive field of layer stacks and the ρ → kernel-size mapping.
//!
//! Per axis, with `RF_0 = 1` and `J_0 = 1`:
//!
//! ```text
//! RF_n = RF_{n-1} + (k_n - 1) * J_{n-1}
//! J_n  = J_{n-1} * s_n
//! ```
//!
//! Time and frequency are tracked independently. Channel counts never enter.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAX_RHO: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeomKind {
    /// Convolutions must have odd kernels.
    Conv,
    /// Pooling windows may be even.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub kind: GeomKind,
}

impl LayerGeom {
    pub fn conv(k: usize, s: usize) -> Self {
        Self { kernel: (k, k), stride: (s, s), kind: GeomKind::Conv }
    }

    pub fn pool(k: usize) -> Self {
        Self { kernel: (k, k), stride: (k, k), kind: GeomKind::Pool }
    }

    pub fn validate(&self) -> Result<()> {
        let (kt, kf) = self.kernel;
        let mut errs = Vec::new();
        if kt == 0 || kf == 0 {
            errs.push(format!("kernel {kt}x{kf} must be positive"));
        }
        if self.kind == GeomKind::Conv && (kt % 2 == 0 || kf % 2 == 0) {
            errs.push(format!("convolution kernel {kt}x{kf} must be odd"));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            errs.push(format!("stride {:?} must be >= 1", self.stride));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RFResult {
    pub rf_t: usize,
    pub rf_f: usize,
    pub jump_t: usize,
    pub jump_f: usize,
}

impl RFResult {
    const UNIT: RFResult = RFResult { rf_t: 1, rf_f: 1, jump_t: 1, jump_f: 1 };

    fn push(self, l: &LayerGeom) -> Self {
        RFResult {
            rf_t: self.rf_t + (l.kernel.0 - 1) * self.jump_t,
            rf_f: self.rf_f + (l.kernel.1 - 1) * self.jump_f,
            jump_t: self.jump_t * l.stride.0,
            jump_f: self.jump_f * l.stride.1,
        }
    }
}

pub fn max_rf(layers: &[LayerGeom]) -> Result<RFResult> {
    Ok(*rf_trace(layers)?.last().expect("non-empty"))
}

/// RF after each layer, in order.
pub fn rf_trace(layers: &[LayerGeom]) -> Result<Vec<RFResult>> {
    if layers.is_empty() {
        return Err(Error::invalid("receptive field of an empty layer list"));
    }
    let mut out = Vec::with_capacity(layers.len());
    let mut acc = RFResult::UNIT;
    for l in layers {
        l.validate()?;
        acc = acc.push(l);
        out.push(acc);
    }
    Ok(out)
}

/// Number of residual-block convolutions that get a 3×3 kernel for a given ρ.
///
/// `ceil(ρ · 2B / 12)` over the `2B` block convolutions, so ρ = 0 leaves every block conv
/// pointwise and ρ = 12 makes all of them spatial. Strictly increasing in ρ when `B >= 6`.
pub fn spatial_block_convs(rho: usize, num_blocks: usize) -> Result<usize> {
    if rho > MAX_RHO {
        return Err(Error::invalid(format!("rho = {rho} is outside 0..={MAX_RHO}")));
    }
    if num_blocks == 0 {
        return Err(Error::invalid("num_blocks must be >= 1"));
    }
    Ok((rho * 2 * num_blocks).div_ceil(MAX_RHO))
}

/// Kernel size of each block's two convolutions, in network order: the first
/// [`spatial_block_convs`] convs are 3×3, the rest 1×1.
pub fn rho_to_kernels(rho: usize, num_blocks: usize) -> Result<Vec<[usize; 2]>> {
    let spatial = spatial_block_convs(rho, num_blocks)?;
    Ok((0..num_blocks)
        .map(|b| {
            let k = |i: usize| if 2 * b + i < spatial { 3 } else { 1 };
            [k(0), k(1)]
        })
        .collect())
}
