//! Reference implementations shared by the integration tests. Everything here works in f64
//! and never calls into the kernels it checks, except to evaluate forward passes.
#![allow(dead_code)]

use rand::Rng;
use rfdamp_core::model::ArchSpec;
use rfdamp_core::Tensor;

/// Step for central differences.
pub const EPS: f32 = 1e-3;
/// Norm-wise relative error bound for analytic vs numeric gradients.
pub const GRAD_TOL: f64 = 1e-3;

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|v| *v as f64).collect()
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// `Σ r_i y_i` in f64, the scalar whose gradient w.r.t. `y` is `r`.
pub fn dot(r: &[f64], y: &[f32]) -> f64 {
    r.iter().zip(y).map(|(a, b)| a * *b as f64).sum()
}

/// Central differences of `loss` w.r.t. every entry of `x`. The effective step is the
/// difference of the perturbed f32 values, not the nominal `EPS`.
pub fn numeric_grad(x: &mut [f32], mut loss: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let hi = orig + EPS;
        let lo = orig - EPS;
        x[i] = hi;
        let lp = loss(x);
        x[i] = lo;
        let lm = loss(x);
        x[i] = orig;
        g.push((lp - lm) / (hi as f64 - lo as f64));
    }
    g
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn as_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

pub fn tensor_f32(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, as_f32(v)).unwrap()
}

/// Six nested loops, cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (n, c_in, t, f): (usize, usize, usize, usize),
    w: &[f64],
    b: &[f64],
    (c_out, kt, kf): (usize, usize, usize),
    (st, sf): (usize, usize),
    (pt, pf): (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let to = (t + 2 * pt - kt) / st + 1;
    let fo = (f + 2 * pf - kf) / sf + 1;
    let mut out = vec![0.0; n * c_out * to * fo];
    for bi in 0..n {
        for o in 0..c_out {
            for y in 0..to {
                for z in 0..fo {
                    let mut s = b[o];
                    for i in 0..c_in {
                        for dy in 0..kt {
                            for dz in 0..kf {
                                let iy = (y * st + dy) as isize - pt as isize;
                                let iz = (z * sf + dz) as isize - pf as isize;
                                if iy < 0 || iz < 0 || iy >= t as isize || iz >= f as isize {
                                    continue;
                                }
                                s += w[((o * c_in + i) * kt + dy) * kf + dz]
                                    * x[((bi * c_in + i) * t + iy as usize) * f + iz as usize];
                            }
                        }
                    }
                    out[((bi * c_out + o) * to + y) * fo + z] = s;
                }
            }
        }
    }
    (out, to, fo)
}

/// Random architecture with varied depth, stage layout, stem and ρ.
pub fn random_spec<R: Rng>(rng: &mut R) -> ArchSpec {
    let num_blocks = rng.gen_range(1..=7);
    let mut stages = Vec::new();
    let mut left = num_blocks;
    while left > 0 && stages.len() < 3 {
        let take = if stages.len() == 2 { left } else { rng.gen_range(1..=left) };
        stages.push(take);
        left -= take;
    }
    ArchSpec {
        base_channels: 2,
        rho: rng.gen_range(0..=12),
        num_blocks,
        stages,
        stem_kernels: [[1, 3, 5, 7][rng.gen_range(0..4)], [1, 3, 5][rng.gen_range(0..3)]],
        stem_strides: [rng.gen_range(1..=2), rng.gen_range(1..=2)],
        pool_after_first_stage: rng.gen_bool(0.5),
        in_channels: 1,
        num_classes: 2,
        ..ArchSpec::default()
    }
}
pub mod grads;
