//! Effective receptive field from input-gradient energy.
//!
//! A one-hot gradient is placed at the spatially central unit of the last feature map (all
//! channels) and backpropagated to the input; `|∂/∂input|` averaged over batch and input
//! channels is the energy map. Widths per axis are the shortest contiguous interval grown
//! greedily from the map's argmax that holds `fraction` of that axis' marginal energy.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvLayer};
use crate::ops::norm::Mode;
use crate::ops::{avg_pool2d, avg_pool2d_backward};
use crate::rf::{max_rf, GeomKind, LayerGeom, RFResult};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_FRACTION: f64 = 0.95;
pub const DEFAULT_PROBE_BATCH: usize = 16;

/// Anything with a differentiable map from input to a last feature map.
pub trait Probe {
    fn probe_forward(&mut self, x: &Tensor) -> Result<Tensor>;
    fn probe_backward(&mut self, grad: &Tensor) -> Result<Tensor>;
    fn theoretical_rf(&self) -> Result<RFResult>;
}

impl Probe for Network {
    fn probe_forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_features(x, Mode::Eval)
    }

    /// Parameter gradients touched by the probe are cleared again afterwards.
    fn probe_backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.backward_features(grad)?;
        self.zero_grad();
        Ok(g)
    }

    fn theoretical_rf(&self) -> Result<RFResult> {
        max_rf(&self.geometry())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfReport {
    /// Row-major `[t, f]`.
    pub energy_map: Vec<f64>,
    pub t: usize,
    pub f: usize,
    pub argmax: (usize, usize),
    pub width_t: usize,
    pub width_f: usize,
    /// Extent between the first and last non-zero entries of each marginal profile.
    pub support_t: usize,
    pub support_f: usize,
    pub fraction: f64,
    pub rf: RFResult,
    /// The theoretical RF does not fit inside the input, so widths are clipped by the borders.
    pub clipped: bool,
}

impl ErfReport {
    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.energy_map[t * self.f + f]
    }

    pub fn profile_t(&self) -> Vec<f64> {
        self.energy_map.chunks_exact(self.f).map(|r| r.iter().sum()).collect()
    }

    pub fn profile_f(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.f];
        for row in self.energy_map.chunks_exact(self.f) {
            for (a, b) in p.iter_mut().zip(row) {
                *a += b;
            }
        }
        p
    }

    /// Energy map as CSV, one row per time index.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.energy_map.chunks_exact(self.f) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "width_t={} width_f={} support_t={} support_f={} rf_t={} rf_f={} fraction={} clipped={}",
            self.width_t, self.width_f, self.support_t, self.support_f, self.rf.rf_t, self.rf.rf_f, self.fraction, self.clipped
        )
    }
}

/// Greedy expansion from `start` toward the heavier neighbour until `fraction` of the mass
/// is covered. Ties extend toward lower indices. Expansion never leaves the nonzero support,
/// so zero gaps (strided layers leave some) cannot pull the window outward.
pub fn energy_width(profile: &[f64], start: usize, fraction: f64) -> usize {
    let total: f64 = profile.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let first = profile.iter().position(|v| *v != 0.0).unwrap_or(start).min(start);
    let last = profile.iter().rposition(|v| *v != 0.0).unwrap_or(start).max(start);
    let goal = fraction * total;
    let (mut lo, mut hi) = (start, start);
    let mut mass = profile[start];
    while mass < goal && (lo > first || hi < last) {
        let left = if lo > first { profile[lo - 1] } else { f64::NEG_INFINITY };
        let right = if hi < last { profile[hi + 1] } else { f64::NEG_INFINITY };
        if left >= right {
            lo -= 1;
            mass += left;
        } else {
            hi += 1;
            mass += right;
        }
    }
    hi - lo + 1
}

fn support(profile: &[f64]) -> usize {
    let first = profile.iter().position(|v| *v != 0.0);
    let last = profile.iter().rposition(|v| *v != 0.0);
    match (first, last) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    }
}

pub fn measure_erf<P: Probe + ?Sized>(probe: &mut P, input: &Tensor, fraction: f64) -> Result<ErfReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("energy fraction {fraction} must lie in (0, 1]")));
    }
    let (n, c, t, f) = input.dims4()?;
    let rf = probe.theoretical_rf()?;
    let out = probe.probe_forward(input)?;
    let (on, oc, ot, of) = out.dims4()?;
    let mut g = Tensor::zeros(out.shape());
    let (ct, cf) = ((ot - 1) / 2, (of - 1) / 2);
    for b in 0..on {
        for ch in 0..oc {
            g.data_mut()[((b * oc + ch) * ot + ct) * of + cf] = 1.0;
        }
    }
    let gin = probe.probe_backward(&g)?;
    gin.ensure_finite("input gradient")?;
    let mut energy = vec![0.0f64; t * f];
    for plane in gin.data().chunks_exact(t * f) {
        for (e, v) in energy.iter_mut().zip(plane) {
            *e += v.abs() as f64;
        }
    }
    let scale = 1.0 / (n * c) as f64;
    energy.iter_mut().for_each(|e| *e *= scale);
    let argmax_flat = energy
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > energy[best] { i } else { best });
    let mut report = ErfReport {
        energy_map: energy,
        t,
        f,
        argmax: (argmax_flat / f, argmax_flat % f),
        width_t: 0,
        width_f: 0,
        support_t: 0,
        support_f: 0,
        fraction,
        rf,
        clipped: rf.rf_t > t || rf.rf_f > f,
    };
    let (pt, pf) = (report.profile_t(), report.profile_f());
    report.width_t = energy_width(&pt, report.argmax.0, fraction);
    report.width_f = energy_width(&pf, report.argmax.1, fraction);
    report.support_t = support(&pt);
    report.support_f = support(&pf);
    Ok(report)
}

/// Random-normal probe batch `[batch, channels, t, f]`.
pub fn probe_batch(batch: usize, channels: usize, t: usize, f: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[batch, channels, t, f], 1.0, &mut rng)
}

/// Linear stand-in for a layer stack: single-channel all-ones convolutions ("same" padding)
/// and average pools, so input-gradient support equals the theoretical RF exactly.
#[derive(Debug, Clone)]
pub struct LinearProbeNet {
    layers: Vec<(LayerGeom, Option<ConvLayer>)>,
    inputs: Vec<Tensor>,
}

impl LinearProbeNet {
    pub fn new(geometry: &[LayerGeom]) -> Result<Self> {
        max_rf(geometry)?;
        let layers = geometry
            .iter()
            .map(|g| {
                let conv = (g.kind == GeomKind::Conv).then(|| {
                    let (kt, kf) = g.kernel;
                    let mut l = ConvLayer::new(1, 1, g.kernel, g.stride, ((kt - 1) / 2, (kf - 1) / 2));
                    l.weight.data_mut().fill(1.0);
                    l
                });
                (*g, conv)
            })
            .collect();
        Ok(Self { layers, inputs: Vec::new() })
    }

    pub fn geometry(&self) -> Vec<LayerGeom> {
        self.layers.iter().map(|(g, _)| *g).collect()
    }
}

impl Probe for LinearProbeNet {
    fn probe_forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.inputs.clear();
        let mut h = x.clone();
        for (g, conv) in &self.layers {
            self.inputs.push(h.clone());
            h = match conv {
                Some(l) => conv2d_forward(&h, l)?,
                None => {
                    if g.kernel.0 != g.kernel.1 || g.stride != g.kernel {
                        return Err(Error::invalid("linear probe supports square pools with stride = size"));
                    }
                    avg_pool2d(&h, g.kernel.0)?
                }
            };
        }
        Ok(h)
    }

    fn probe_backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if self.inputs.len() != self.layers.len() {
            return Err(Error::State("linear probe: backward before forward".into()));
        }
        let mut g = grad.clone();
        for ((geom, conv), input) in self.layers.iter().zip(&self.inputs).rev() {
            g = match conv {
                Some(l) => conv2d_backward(&g, Some(input), l)?.input,
                None => avg_pool2d_backward(&g, geom.kernel.0, input.shape())?,
            };
        }
        self.inputs.clear();
        Ok(g)
    }

    fn theoretical_rf(&self) -> Result<RFResult> {
        max_rf(&self.geometry())
    }
}

/// Input side length large enough that the central unit's RF lies inside the input.
pub fn probe_extent(rf: usize, jump: usize) -> usize {
    (2 * rf + 4 * jump).div_ceil(jump) * jump
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_initialized, ArchSpec};

    #[test]
    fn single_conv_support_is_kernel() {
        let mut net = LinearProbeNet::new(&[LayerGeom::conv(3, 1)]).unwrap();
        let x = Tensor::ones(&[1, 1, 9, 9]);
        let r = measure_erf(&mut net, &x, 0.95).unwrap();
        assert_eq!((r.support_t, r.support_f), (3, 3));
        assert_eq!(r.argmax, (3, 3));
        for t in 0..9 {
            for f in 0..9 {
                let inside = (3..6).contains(&t) && (3..6).contains(&f);
                assert_eq!(r.at(t, f) > 0.0, inside);
            }
        }
    }

    #[test]
    fn width_of_flat_profile() {
        assert_eq!(energy_width(&[1.0; 10], 5, 0.95), 10);
        assert_eq!(energy_width(&[1.0; 10], 5, 0.5), 5);
        assert_eq!(energy_width(&[0.0, 0.0, 5.0, 0.0], 2, 0.95), 1);
        assert_eq!(energy_width(&[0.0; 4], 0, 0.95), 0);
        // A zero gap inside the support must not send the window off the other end.
        assert_eq!(energy_width(&[0.0, 0.0, 3.0, 0.0, 1.0], 2, 0.95), 3);
    }

    #[test]
    fn stacked_with_pool_matches_rf() {
        let geo = [LayerGeom::conv(5, 2), LayerGeom::conv(3, 1), LayerGeom::pool(2), LayerGeom::conv(3, 1)];
        let rf = max_rf(&geo).unwrap();
        let mut net = LinearProbeNet::new(&geo).unwrap();
        let n = probe_extent(rf.rf_t, rf.jump_t);
        let r = measure_erf(&mut net, &Tensor::ones(&[1, 1, n, n]), 0.95).unwrap();
        assert_eq!((r.support_t, r.support_f), (rf.rf_t, rf.rf_f));
        assert!(!r.clipped);
    }

    #[test]
    fn rescaled_gradient_gives_same_map() {
        struct Scaled(LinearProbeNet, f32);
        impl Probe for Scaled {
            fn probe_forward(&mut self, x: &Tensor) -> Result<Tensor> {
                self.0.probe_forward(x)
            }
            fn probe_backward(&mut self, g: &Tensor) -> Result<Tensor> {
                let s = Tensor::from_vec(g.shape(), g.data().iter().map(|v| v * self.1).collect())?;
                let mut out = self.0.probe_backward(&s)?;
                out.data_mut().iter_mut().for_each(|v| *v /= self.1);
                Ok(out)
            }
            fn theoretical_rf(&self) -> Result<RFResult> {
                self.0.theoretical_rf()
            }
        }
        let geo = [LayerGeom::conv(3, 1), LayerGeom::conv(3, 2)];
        let x = Tensor::ones(&[1, 1, 12, 12]);
        let a = measure_erf(&mut LinearProbeNet::new(&geo).unwrap(), &x, 0.9).unwrap();
        let b = measure_erf(&mut Scaled(LinearProbeNet::new(&geo).unwrap(), 4.0), &x, 0.9).unwrap();
        for (u, v) in a.energy_map.iter().zip(&b.energy_map) {
            assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
        }
    }

    #[test]
    fn network_support_inside_rf_and_deterministic() {
        let spec = ArchSpec { base_channels: 4, rho: 3, num_classes: 3, ..ArchSpec::default() };
        let mut net = build_initialized(&spec, 1).unwrap();
        let x = probe_batch(2, 2, 64, 64, 4);
        let a = measure_erf(&mut net, &x, 0.95).unwrap();
        let b = measure_erf(&mut net, &x, 0.95).unwrap();
        assert_eq!(a, b);
        assert!(a.energy_map.iter().all(|v| *v >= 0.0));
        assert!(a.support_t <= a.rf.rf_t && a.support_f <= a.rf.rf_f);
        assert!(a.width_t <= a.support_t && a.width_f <= a.support_f);
        net.visit_params(&mut |_, _, t| assert!(t.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0))));
    }

    #[test]
    fn clipped_flag_when_rf_exceeds_input() {
        let mut net = LinearProbeNet::new(&[LayerGeom::conv(5, 1), LayerGeom::conv(5, 1)]).unwrap();
        let r = measure_erf(&mut net, &Tensor::ones(&[1, 1, 6, 6]), 0.95).unwrap();
        assert!(r.clipped);
    }

    #[test]
    fn bad_fraction_rejected() {
        let mut net = LinearProbeNet::new(&[LayerGeom::conv(3, 1)]).unwrap();
        assert!(measure_erf(&mut net, &Tensor::ones(&[1, 1, 5, 5]), 0.0).is_err());
    }
}
