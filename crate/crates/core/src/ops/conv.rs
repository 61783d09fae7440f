//! 2-D convolution (cross-correlation) over `[N, C, T, F]` tensors via im2col + SGEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Weight `[C_out, C_in, k_t, k_f]`, bias `[C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Geometry of a convolution, independent of the weight values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_out: usize,
    pub c_in: usize,
    pub kt: usize,
    pub kf: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kt * self.kf
    }

    pub fn output_hw(&self, t: usize, f: usize) -> Result<(usize, usize)> {
        let (pt, pf) = self.padding;
        let (st, sf) = self.stride;
        if st == 0 || sf == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        if t + 2 * pt < self.kt || f + 2 * pf < self.kf {
            return Err(Error::dim(format!(
                "input spatial {t}x{f} with padding {pt}x{pf} is smaller than kernel {}x{}",
                self.kt, self.kf
            )));
        }
        Ok(((t + 2 * pt - self.kt) / st + 1, (f + 2 * pf - self.kf) / sf + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kf == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

impl ConvLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel.0, kernel.1]).into_param(),
            bias: Tensor::zeros(&[c_out]).into_param(),
            stride,
            padding,
        }
    }

    /// Stride 1 with "same" padding `(k-1)/2`.
    pub fn same(c_in: usize, c_out: usize, kernel: (usize, usize)) -> Self {
        Self::new(c_in, c_out, kernel, (1, 1), ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2))
    }

    pub fn shape(&self) -> ConvShape {
        let s = self.weight.shape();
        ConvShape { c_out: s[0], c_in: s[1], kt: s[2], kf: s[3], stride: self.stride, padding: self.padding }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[2], s[3])
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Fan-in scaled normal initialization, `std = sqrt(2 / fan_in)`; bias zero.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.shape().patch_len() as f32;
        let std = (2.0 / fan_in).sqrt();
        let fresh = Tensor::randn(self.weight.shape(), std, rng);
        self.weight.data_mut().copy_from_slice(fresh.data());
        self.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Plain convolution: `W * x + b`.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    conv2d_forward_raw(input, layer.weight.data(), layer.bias.data(), layer.shape())
}

/// Gradients of a plain convolution given the upstream gradient and the saved forward input.
pub fn conv2d_backward(grad_out: &Tensor, saved_input: Option<&Tensor>, layer: &ConvLayer) -> Result<ConvGrads> {
    let input = saved_input.ok_or_else(|| Error::State("conv backward called without a saved input".into()))?;
    conv2d_backward_raw(grad_out, input, layer.weight.data(), layer.shape())
}

fn check_input(input: &Tensor, shape: &ConvShape, weight_len: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, t, f) = input.dims4()?;
    if c != shape.c_in {
        return Err(Error::dim(format!(
            "input shape {:?} has {c} channels but weight shape [{}, {}, {}, {}] expects {}",
            input.shape(),
            shape.c_out,
            shape.c_in,
            shape.kt,
            shape.kf,
            shape.c_in
        )));
    }
    if weight_len != shape.c_out * shape.patch_len() {
        return Err(Error::dim("weight buffer does not match its declared shape"));
    }
    let (to, fo) = shape.output_hw(t, f)?;
    Ok((n, t, f, to, fo))
}

/// Convolution with an explicit weight buffer (used by damping to pass `W ⊙ C`).
pub(crate) fn conv2d_forward_raw(input: &Tensor, weight: &[f32], bias: &[f32], shape: ConvShape) -> Result<Tensor> {
    let (n, t, f, to, fo) = check_input(input, &shape, weight.len())?;
    if bias.len() != shape.c_out {
        return Err(Error::dim(format!("bias of length {} for {} output channels", bias.len(), shape.c_out)));
    }
    let k = shape.patch_len();
    let p = to * fo;
    let in_stride = shape.c_in * t * f;
    let mut out = vec![0.0f32; n * shape.c_out * p];
    let mut col = if shape.is_pointwise() { Vec::new() } else { vec![0.0f32; k * p] };
    for b in 0..n {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let cols: &[f32] = if shape.is_pointwise() {
            x
        } else {
            im2col(x, t, f, to, fo, &shape, &mut col);
            &col
        };
        let y = &mut out[b * shape.c_out * p..(b + 1) * shape.c_out * p];
        for (o, row) in y.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        // y[C_out, P] += W[C_out, K] · col[K, P]
        gemm(shape.c_out, k, p, weight, (k, 1), cols, (p, 1), y, 1.0);
    }
    Tensor::from_vec(&[n, shape.c_out, to, fo], out)
}

pub(crate) fn conv2d_backward_raw(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &[f32],
    shape: ConvShape,
) -> Result<ConvGrads> {
    let (n, t, f, to, fo) = check_input(input, &shape, weight.len())?;
    let expected = [n, shape.c_out, to, fo];
    if grad_out.shape() != expected {
        return Err(Error::dim(format!(
            "grad_out shape {:?} does not match forward output shape {expected:?}",
            grad_out.shape()
        )));
    }
    let k = shape.patch_len();
    let p = to * fo;
    let in_stride = shape.c_in * t * f;
    let mut grad_w = vec![0.0f32; shape.c_out * k];
    let mut grad_b = vec![0.0f32; shape.c_out];
    let mut grad_in = vec![0.0f32; input.numel()];
    let pointwise = shape.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; k * p] };
    let mut grad_col = if pointwise { Vec::new() } else { vec![0.0f32; k * p] };
    for b in 0..n {
        let g = &grad_out.data()[b * shape.c_out * p..(b + 1) * shape.c_out * p];
        for (o, row) in g.chunks_exact(p).enumerate() {
            grad_b[o] += row.iter().sum::<f32>();
        }
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let gx = &mut grad_in[b * in_stride..(b + 1) * in_stride];
        if pointwise {
            // dW[C_out, K] += g[C_out, P] · x[K, P]^T
            gemm(shape.c_out, p, k, g, (p, 1), x, (1, p), &mut grad_w, 1.0);
            // dx[K, P] = W[C_out, K]^T · g[C_out, P]
            gemm(k, shape.c_out, p, weight, (1, k), g, (p, 1), gx, 0.0);
        } else {
            im2col(x, t, f, to, fo, &shape, &mut col);
            gemm(shape.c_out, p, k, g, (p, 1), &col, (1, p), &mut grad_w, 1.0);
            gemm(k, shape.c_out, p, weight, (1, k), g, (p, 1), &mut grad_col, 0.0);
            col2im(&grad_col, t, f, to, fo, &shape, gx);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weight: grad_w,
        bias: grad_b,
    })
}

fn im2col(x: &[f32], t: usize, f: usize, to: usize, fo: usize, s: &ConvShape, col: &mut [f32]) {
    let (st, sf) = s.stride;
    let (pt, pf) = s.padding;
    let p = to * fo;
    for c in 0..s.c_in {
        let plane = &x[c * t * f..(c + 1) * t * f];
        for i in 0..s.kt {
            for j in 0..s.kf {
                let row = &mut col[((c * s.kt + i) * s.kf + j) * p..][..p];
                for oy in 0..to {
                    let y = (oy * st + i) as isize - pt as isize;
                    let dst = &mut row[oy * fo..(oy + 1) * fo];
                    if y < 0 || y >= t as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[y as usize * f..(y as usize + 1) * f];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let xx = (ox * sf + j) as isize - pf as isize;
                        *v = if xx < 0 || xx >= f as isize { 0.0 } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], t: usize, f: usize, to: usize, fo: usize, s: &ConvShape, gx: &mut [f32]) {
    let (st, sf) = s.stride;
    let (pt, pf) = s.padding;
    let p = to * fo;
    for c in 0..s.c_in {
        let plane = &mut gx[c * t * f..(c + 1) * t * f];
        for i in 0..s.kt {
            for j in 0..s.kf {
                let row = &col[((c * s.kt + i) * s.kf + j) * p..][..p];
                for oy in 0..to {
                    let y = (oy * st + i) as isize - pt as isize;
                    if y < 0 || y >= t as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * f..(y as usize + 1) * f];
                    for ox in 0..fo {
                        let xx = (ox * sf + j) as isize - pf as isize;
                        if xx >= 0 && (xx as usize) < f {
                            dst[xx as usize] += row[oy * fo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m, n] = beta * c + a[m, k] · b[k, n]`, strides given as (row, col); `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the slices cover every index reachable through the given dimensions and
    // strides (checked above in debug builds, guaranteed by all callers in this module).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
