//! Finite-difference checks for every differentiable op. Each returns one row per
//! (op, shape, wrt) with the norm-wise relative error.

use super::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfdamp_core::damping::{build_damping_matrix, damped_conv2d, damped_conv2d_backward, DampAxis, DampingSpec};
use rfdamp_core::decomposition::{decompose_conv, DecomposedBlock};
use rfdamp_core::model::{build_initialized, ArchSpec, Network};
use rfdamp_core::ops::norm::Mode;
use rfdamp_core::ops::*;

pub struct Row {
    pub op: &'static str,
    pub case: String,
    pub wrt: &'static str,
    pub err: f64,
}

fn row(op: &'static str, case: String, wrt: &'static str, analytic: &[f32], numeric: &[f64]) -> Row {
    Row { op, case, wrt, err: rel_err(&to_f64(analytic), numeric) }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

type ConvCase = ([usize; 4], usize, (usize, usize), (usize, usize), (usize, usize));

const CONV_CASES: [ConvCase; 3] = [
    ([2, 3, 6, 5], 4, (3, 3), (1, 1), (1, 1)),
    ([1, 2, 7, 8], 3, (3, 5), (2, 1), (1, 2)),
    ([3, 1, 5, 5], 2, (1, 1), (1, 2), (0, 0)),
];

pub fn conv(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (xs, co, k, s, p) in CONV_CASES {
        let mut layer = ConvLayer::new(xs[1], co, k, s, p);
        layer.init(&mut rng);
        layer.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let x = randn(&mut rng, &xs);
        let y = conv2d_forward(&x, &layer).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = conv2d_backward(&tensor_f32(y.shape(), &r), Some(&x), &layer).unwrap();
        let case = format!("{xs:?} k{k:?} s{s:?} p{p:?}");
        let mut xd = x.data().to_vec();
        let n = numeric_grad(&mut xd, |v| dot(&r, conv2d_forward(&Tensor::from_vec(&xs, v.to_vec()).unwrap(), &layer).unwrap().data()));
        out.push(row("conv2d", case.clone(), "input", g.input.data(), &n));
        let mut w = layer.weight.data().to_vec();
        let n = numeric_grad(&mut w, |v| {
            let mut l = layer.clone();
            l.weight.data_mut().copy_from_slice(v);
            dot(&r, conv2d_forward(&x, &l).unwrap().data())
        });
        out.push(row("conv2d", case.clone(), "weight", &g.weight, &n));
        let mut b = layer.bias.data().to_vec();
        let n = numeric_grad(&mut b, |v| {
            let mut l = layer.clone();
            l.bias.data_mut().copy_from_slice(v);
            dot(&r, conv2d_forward(&x, &l).unwrap().data())
        });
        out.push(row("conv2d", case, "bias", &g.bias, &n));
    }
    out
}

pub fn damped_conv(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let axes = [DampAxis::Frequency, DampAxis::Both, DampAxis::Time];
    for ((xs, co, k, s, p), axis) in CONV_CASES.into_iter().take(2).chain([([2, 2, 9, 9], 3, (5, 5), (1, 1), (2, 2))]).zip(axes) {
        let mut layer = ConvLayer::new(xs[1], co, k, s, p);
        layer.init(&mut rng);
        let c = build_damping_matrix(k.0, k.1, &DampingSpec { axis, ..DampingSpec::frequency(0.1) }).unwrap();
        let x = randn(&mut rng, &xs);
        let y = damped_conv2d(&x, &layer, &c).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = damped_conv2d_backward(&tensor_f32(y.shape(), &r), Some(&x), &layer, &c).unwrap();
        let case = format!("{xs:?} k{k:?} {axis:?}");
        let mut xd = x.data().to_vec();
        let n = numeric_grad(&mut xd, |v| dot(&r, damped_conv2d(&Tensor::from_vec(&xs, v.to_vec()).unwrap(), &layer, &c).unwrap().data()));
        out.push(row("damped_conv2d", case.clone(), "input", g.input.data(), &n));
        let mut w = layer.weight.data().to_vec();
        let n = numeric_grad(&mut w, |v| {
            let mut l = layer.clone();
            l.weight.data_mut().copy_from_slice(v);
            dot(&r, damped_conv2d(&x, &l, &c).unwrap().data())
        });
        out.push(row("damped_conv2d", case, "weight", &g.weight, &n));
    }
    out
}

fn part<'a>(b: &'a mut DecomposedBlock, which: &str) -> &'a mut ConvLayer {
    match which {
        "reduce" => &mut b.reduce,
        "core" => &mut b.core,
        _ => &mut b.expand,
    }
}

pub fn decomposed(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cases = [([2, 4, 6, 6], 8, 3, 1, 2, true), ([1, 3, 7, 5], 4, 3, 2, 4, false), ([2, 2, 8, 8], 6, 5, 1, 3, true)];
    for (xs, co, k, s, z, damp) in cases {
        let p = (k - 1) / 2;
        let mut block = decompose_conv(xs[1], co, (k, k), (s, s), (p, p), z).unwrap();
        block.init(&mut rng);
        let c = damp.then(|| build_damping_matrix(k, k, &DampingSpec::frequency(0.1)).unwrap());
        let x = randn(&mut rng, &xs);
        let (y, cache) = block.forward(&x, c.as_ref()).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = block.backward(&tensor_f32(y.shape(), &r), &cache, c.as_ref()).unwrap();
        let case = format!("{xs:?} -> {co} k{k} s{s} Z{z} damped={damp}");
        let mut xd = x.data().to_vec();
        let n = numeric_grad(&mut xd, |v| dot(&r, block.forward(&Tensor::from_vec(&xs, v.to_vec()).unwrap(), c.as_ref()).unwrap().0.data()));
        out.push(row("decomposed", case.clone(), "input", g.input.data(), &n));
        for (which, analytic) in [("reduce", &g.reduce.weight), ("core", &g.core.weight), ("expand", &g.expand.weight)] {
            let mut w = part(&mut block.clone(), which).weight.data().to_vec();
            let n = numeric_grad(&mut w, |v| {
                let mut b = block.clone();
                part(&mut b, which).weight.data_mut().copy_from_slice(v);
                dot(&r, b.forward(&x, c.as_ref()).unwrap().0.data())
            });
            out.push(row("decomposed", case.clone(), which, analytic, &n));
        }
    }
    out
}

pub fn batchnorm(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (xs, mode) in [([4, 3, 3, 3], Mode::Train), ([2, 2, 5, 4], Mode::Train), ([3, 4, 2, 2], Mode::Eval), ([1, 2, 4, 4], Mode::Train)] {
        let mut bn = BatchNorm2d::new(xs[1]);
        bn.scale.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        bn.shift.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        bn.running_mean.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        bn.running_var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        let x = randn(&mut rng, &xs);
        let fwd = |x: &Tensor, bn: &BatchNorm2d| {
            let mut b = bn.clone();
            batchnorm2d(x, &mut b, mode).unwrap().0
        };
        let (y, cache) = batchnorm2d(&x, &mut bn.clone(), mode).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = batchnorm2d_backward(&tensor_f32(y.shape(), &r), &cache, &bn).unwrap();
        let case = format!("{xs:?} {mode:?}");
        let mut xd = x.data().to_vec();
        let n = numeric_grad(&mut xd, |v| dot(&r, fwd(&Tensor::from_vec(&xs, v.to_vec()).unwrap(), &bn).data()));
        out.push(row("batchnorm2d", case.clone(), "input", g.input.data(), &n));
        let mut s = bn.scale.data().to_vec();
        let n = numeric_grad(&mut s, |v| {
            let mut b = bn.clone();
            b.scale.data_mut().copy_from_slice(v);
            dot(&r, fwd(&x, &b).data())
        });
        out.push(row("batchnorm2d", case.clone(), "scale", &g.scale, &n));
        let mut s = bn.shift.data().to_vec();
        let n = numeric_grad(&mut s, |v| {
            let mut b = bn.clone();
            b.shift.data_mut().copy_from_slice(v);
            dot(&r, fwd(&x, &b).data())
        });
        out.push(row("batchnorm2d", case, "shift", &g.shift, &n));
    }
    out
}

pub fn linear_layer(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (n_, i, o) in [(2, 5, 3), (4, 8, 10), (1, 3, 1)] {
        let mut l = Linear::new(i, o);
        l.weight.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        l.bias.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x = randn(&mut rng, &[n_, i]);
        let y = linear(&x, &l).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = linear_backward(&tensor_f32(y.shape(), &r), &x, &l).unwrap();
        let case = format!("[{n_}, {i}] -> {o}");
        let mut xd = x.data().to_vec();
        let n = numeric_grad(&mut xd, |v| dot(&r, linear(&Tensor::from_vec(&[n_, i], v.to_vec()).unwrap(), &l).unwrap().data()));
        out.push(row("linear", case.clone(), "input", g.input.data(), &n));
        let mut w = l.weight.data().to_vec();
        let n = numeric_grad(&mut w, |v| {
            let mut m = l.clone();
            m.weight.data_mut().copy_from_slice(v);
            dot(&r, linear(&x, &m).unwrap().data())
        });
        out.push(row("linear", case.clone(), "weight", &g.weight, &n));
        let mut b = l.bias.data().to_vec();
        let n = numeric_grad(&mut b, |v| {
            let mut m = l.clone();
            m.bias.data_mut().copy_from_slice(v);
            dot(&r, linear(&x, &m).unwrap().data())
        });
        out.push(row("linear", case, "bias", &g.bias, &n));
    }
    out
}

pub fn pooling(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for xs in [[2, 3, 4, 4], [1, 2, 6, 8], [3, 1, 5, 7]] {
        // Distinct values 0.01 apart, so no window holds a near-tie the step could flip.
        let numel: usize = xs.iter().product();
        let mut vals: Vec<f32> = (0..numel).map(|i| (i as f32 - numel as f32 / 2.0) * 0.01).collect();
        vals.shuffle(&mut rng);
        let x = Tensor::from_vec(&xs, vals).unwrap();
        let case = format!("{xs:?}");
        let t = |v: &[f32]| Tensor::from_vec(&xs, v.to_vec()).unwrap();

        let (y, arg) = max_pool2d(&x, 2).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = max_pool2d_backward(&tensor_f32(y.shape(), &r), &arg, &xs).unwrap();
        let n = numeric_grad(&mut x.data().to_vec(), |v| dot(&r, max_pool2d(&t(v), 2).unwrap().0.data()));
        out.push(row("max_pool2d", case.clone(), "input", g.data(), &n));

        let y = avg_pool2d(&x, 2).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = avg_pool2d_backward(&tensor_f32(y.shape(), &r), 2, &xs).unwrap();
        let n = numeric_grad(&mut x.data().to_vec(), |v| dot(&r, avg_pool2d(&t(v), 2).unwrap().data()));
        out.push(row("avg_pool2d", case.clone(), "input", g.data(), &n));

        let y = global_avg_pool(&x).unwrap();
        let r = random_vec(&mut rng, y.numel());
        let g = global_avg_pool_backward(&tensor_f32(y.shape(), &r), &xs).unwrap();
        let n = numeric_grad(&mut x.data().to_vec(), |v| dot(&r, global_avg_pool(&t(v)).unwrap().data()));
        out.push(row("global_avg_pool", case, "input", g.data(), &n));
    }
    out
}

pub fn activations_and_loss(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (n_, k) in [(2, 3), (5, 10), (1, 2)] {
        let x = randn(&mut rng, &[n_, k]);
        let labels: Vec<usize> = (0..n_).map(|_| rng.gen_range(0..k)).collect();
        let (_, g) = softmax_cross_entropy(&x, &labels).unwrap();
        let n = numeric_grad(&mut x.data().to_vec(), |v| {
            softmax_cross_entropy(&Tensor::from_vec(&[n_, k], v.to_vec()).unwrap(), &labels).unwrap().0 as f64
        });
        out.push(row("softmax_cross_entropy", format!("[{n_}, {k}]"), "logits", g.data(), &n));
    }
    for xs in [[2, 3, 4, 4], [1, 5, 3, 2], [4, 2, 2, 3]] {
        // Keep inputs away from the kink so central differences are valid.
        let mut x = randn(&mut rng, &xs);
        x.data_mut().iter_mut().for_each(|v| if v.abs() < 0.01 { *v += 0.05 });
        let y = relu(&x);
        let r = random_vec(&mut rng, y.numel());
        let g = relu_backward(&tensor_f32(y.shape(), &r), &y).unwrap();
        let n = numeric_grad(&mut x.data().to_vec(), |v| dot(&r, relu(&Tensor::from_vec(&xs, v.to_vec()).unwrap()).data()));
        out.push(row("relu", format!("{xs:?}"), "input", g.data(), &n));
    }
    out
}

/// Unit direction: the gradient itself, or a random one.
fn direction(rng: &mut ChaCha8Rng, g: &[f64], along_grad: bool) -> Vec<f64> {
    let d: Vec<f64> = if along_grad { g.to_vec() } else { (0..g.len()).map(|_| rng.sample(rand_distr::StandardNormal)).collect() };
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    d.into_iter().map(|v| v / norm).collect()
}

/// Central difference along a direction against `g · Δ`, where `Δ` is the step actually
/// realized in f32. Normalized by `|g| |Δ|` so random directions are not penalized for a
/// small `g · d`. Truncation error grows with the step and f32 roundoff shrinks with it,
/// so the best of a few steps is reported.
fn directional_err(g: &[f64], mut loss_at: impl FnMut(f64) -> (f64, Vec<f64>)) -> f64 {
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    DIR_STEPS
        .iter()
        .map(|&h| {
            let (lp, xp) = loss_at(h);
            let (lm, xm) = loss_at(-h);
            let step: Vec<f64> = xp.iter().zip(&xm).map(|(a, b)| a - b).collect();
            let analytic: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
            let sn = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn * sn == 0.0 {
                0.0
            } else {
                ((lp - lm) - analytic).abs() / (gn * sn)
            }
        })
        .fold(f64::INFINITY, f64::min)
}

const DIR_STEPS: [f64; 3] = [1e-3, 3e-4, 1e-4];
const DIRECTIONS: usize = 4;

/// Mean cross-entropy in f64 from f32 logits.
fn ce64(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
        let lse = m + row.iter().map(|v| (*v as f64 - m).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    total / labels.len() as f64
}

/// Whole network, input and parameter gradients, checked along the gradient direction and
/// random directions. Per-coordinate differences are too noisy in f32 at this depth.
pub fn network(seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let specs = [
        ArchSpec { base_channels: 2, rho: 5, num_blocks: 3, num_classes: 3, ..ArchSpec::default() },
        ArchSpec { base_channels: 4, rho: 8, num_blocks: 3, num_classes: 2, damping: DampingSpec::frequency(0.1), ..ArchSpec::default() },
        ArchSpec {
            base_channels: 4,
            rho: 12,
            num_blocks: 2,
            num_classes: 2,
            decomp: rfdamp_core::decomposition::DecompSpec { enabled: true, z: 2 },
            ..ArchSpec::default()
        },
    ];
    for spec in specs {
        let net = build_initialized(&spec, seed).unwrap();
        let xs = [4, 2, 16, 16];
        let x = randn(&mut rng, &xs);
        let labels: Vec<usize> = (0..xs[0]).map(|i| i % spec.num_classes).collect();
        let loss = |net: &Network, x: &Tensor| -> f64 {
            let mut n = net.clone();
            ce64(&n.forward(x, Mode::Train).unwrap(), &labels)
        };
        let mut work = net.clone();
        let logits = work.forward(&x, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let gin = to_f64(work.backward(&g).unwrap().data());
        let mut gpar = Vec::new();
        work.visit_params(&mut |_, _, t| gpar.extend(t.grad().unwrap().iter().map(|v| *v as f64)));
        let case = format!("base{} rho{} damped={} decomp={}", spec.base_channels, spec.rho, spec.damping.enabled, spec.decomp.enabled);

        let mut worst = 0.0f64;
        for k in 0..DIRECTIONS {
            let d = direction(&mut rng, &gin, k == 0);
            worst = worst.max(directional_err(&gin, |s| {
                let v: Vec<f32> = x.data().iter().zip(&d).map(|(a, b)| (*a as f64 + s * b) as f32).collect();
                let l = loss(&net, &Tensor::from_vec(&xs, v.clone()).unwrap());
                (l, to_f64(&v))
            }));
        }
        out.push(Row { op: "network", case: case.clone(), wrt: "input", err: worst });

        let mut worst = 0.0f64;
        for k in 0..DIRECTIONS {
            let d = direction(&mut rng, &gpar, k == 0);
            worst = worst.max(directional_err(&gpar, |s| {
                let mut m = net.clone();
                let mut at = 0;
                let mut realized = Vec::with_capacity(d.len());
                m.visit_params_mut(&mut |_, _, t| {
                    for v in t.data_mut() {
                        *v = (*v as f64 + s * d[at]) as f32;
                        realized.push(*v as f64);
                        at += 1;
                    }
                });
                (loss(&m, &x), realized)
            }));
        }
        out.push(Row { op: "network", case, wrt: "params", err: worst });
    }
    out
}

pub fn all(seed: u64) -> Vec<Row> {
    let mut rows = conv(seed);
    rows.extend(damped_conv(seed + 1));
    rows.extend(decomposed(seed + 2));
    rows.extend(batchnorm(seed + 3));
    rows.extend(linear_layer(seed + 4));
    rows.extend(pooling(seed + 5));
    rows.extend(activations_and_loss(seed + 6));
    rows.extend(network(seed + 7));
    rows
}
