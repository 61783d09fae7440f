//! Element-wise, pooling, dense and loss primitives with their backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given the forward *output* (or input; the sign pattern is the same).
pub fn relu_backward(grad_out: &Tensor, forward_out: &Tensor) -> Result<Tensor> {
    grad_out.same_shape(forward_out, "relu backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(forward_out.data())
        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Mean over the spatial dims: `[N, C, T, F] -> [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, t, f) = x.dims4()?;
    let hw = (t * f) as f32;
    let data = x.data().chunks_exact(t * f).map(|p| p.iter().sum::<f32>() / hw).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [n, c, t, f] = input_shape[..] else {
        return Err(Error::dim(format!("expected a 4-D input shape, got {input_shape:?}")));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::dim(format!("grad_out {:?} does not match [{n}, {c}]", grad_out.shape())));
    }
    let hw = (t * f) as f32;
    let mut data = Vec::with_capacity(n * c * t * f);
    for g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / hw, t * f));
    }
    Tensor::from_vec(input_shape, data)
}

/// Max pooling with a square window equal to the stride; trailing rows/cols that do not fill
/// a window are dropped. Returns the output and the flat argmax index per output cell.
pub fn max_pool2d(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, t, f) = x.dims4()?;
    if size == 0 || t < size || f < size {
        return Err(Error::dim(format!("cannot max-pool {:?} with window {size}", x.shape())));
    }
    let (to, fo) = (t / size, f / size);
    let mut out = Vec::with_capacity(n * c * to * fo);
    let mut arg = Vec::with_capacity(n * c * to * fo);
    for (pi, plane) in x.data().chunks_exact(t * f).enumerate() {
        for oy in 0..to {
            for ox in 0..fo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for i in 0..size {
                    for j in 0..size {
                        let idx = (oy * size + i) * f + ox * size + j;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(pi * t * f + best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, to, fo], out)?, arg))
}

pub fn max_pool2d_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::dim("max-pool backward: argmax does not match grad_out"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += *g;
    }
    Ok(gx)
}

/// Average pooling with a square window equal to the stride (the linear counterpart of
/// [`max_pool2d`], used for linear probe networks).
pub fn avg_pool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, t, f) = x.dims4()?;
    if size == 0 || t < size || f < size {
        return Err(Error::dim(format!("cannot average-pool {:?} with window {size}", x.shape())));
    }
    let (to, fo) = (t / size, f / size);
    let norm = (size * size) as f32;
    let mut out = Vec::with_capacity(n * c * to * fo);
    for plane in x.data().chunks_exact(t * f) {
        for oy in 0..to {
            for ox in 0..fo {
                let mut s = 0.0;
                for i in 0..size {
                    for j in 0..size {
                        s += plane[(oy * size + i) * f + ox * size + j];
                    }
                }
                out.push(s / norm);
            }
        }
    }
    Tensor::from_vec(&[n, c, to, fo], out)
}

pub fn avg_pool2d_backward(grad_out: &Tensor, size: usize, input_shape: &[usize]) -> Result<Tensor> {
    let [_, _, t, f] = input_shape[..] else {
        return Err(Error::dim(format!("expected a 4-D input shape, got {input_shape:?}")));
    };
    let (to, fo) = (t / size, f / size);
    let norm = (size * size) as f32;
    let mut gx = Tensor::zeros(input_shape);
    let planes = gx.data_mut().chunks_exact_mut(t * f);
    for (plane, g) in planes.zip(grad_out.data().chunks_exact(to * fo)) {
        for oy in 0..to {
            for ox in 0..fo {
                for i in 0..size {
                    for j in 0..size {
                        plane[(oy * size + i) * f + ox * size + j] += g[oy * fo + ox] / norm;
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Fully connected layer, weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_features, in_features]).into_param(),
            bias: Tensor::zeros(&[out_features]).into_param(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

pub fn linear(x: &Tensor, layer: &Linear) -> Result<Tensor> {
    let (o, i) = (layer.out_features(), layer.in_features());
    let [n, xi] = x.shape()[..] else {
        return Err(Error::dim(format!("linear expects [N, {i}], got {:?}", x.shape())));
    };
    if xi != i {
        return Err(Error::dim(format!(
            "linear input {:?} does not match weight {:?}",
            x.shape(),
            layer.weight.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * o);
    for row in x.data().chunks_exact(i) {
        for (w, b) in layer.weight.data().chunks_exact(i).zip(layer.bias.data()) {
            out.push(w.iter().zip(row).map(|(a, c)| a * c).sum::<f32>() + b);
        }
    }
    Tensor::from_vec(&[n, o], out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn linear_backward(grad_out: &Tensor, input: &Tensor, layer: &Linear) -> Result<LinearGrads> {
    let (o, i) = (layer.out_features(), layer.in_features());
    let n = input.shape()[0];
    if grad_out.shape() != [n, o] {
        return Err(Error::dim(format!("linear grad_out {:?} does not match [{n}, {o}]", grad_out.shape())));
    }
    let mut gw = vec![0.0f32; o * i];
    let mut gb = vec![0.0f32; o];
    let mut gx = vec![0.0f32; n * i];
    for b in 0..n {
        let x = &input.data()[b * i..(b + 1) * i];
        let g = &grad_out.data()[b * o..(b + 1) * o];
        for k in 0..o {
            gb[k] += g[k];
            let w = &layer.weight.data()[k * i..(k + 1) * i];
            for j in 0..i {
                gw[k * i + j] += g[k] * x[j];
                gx[b * i + j] += g[k] * w[j];
            }
        }
    }
    Ok(LinearGrads { input: Tensor::from_vec(&[n, i], gx)?, weight: gw, bias: gb })
}

/// Mean softmax cross-entropy over the batch, and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, k] = logits.shape()[..] else {
        return Err(Error::dim(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::dim(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        loss += (z.ln() + m - row[y]) as f64;
        for (c, e) in exps.iter().enumerate() {
            let p = e / z;
            grad.push((p - if c == y { 1.0 } else { 0.0 }) / n as f32);
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::from_vec(&[n, k], grad)?))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
