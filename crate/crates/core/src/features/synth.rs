//! Synthetic two-channel spectrogram classification task.
//!
//! Each class owns a local spectral motif: a few narrow bands at class-specific offsets
//! inside a window of `cue_extent · F` bins, pulsing at a class-specific temporal rate. Every
//! sample places the motif at a random frequency position (spread set by
//! `position_jitter`), adds noise and, with probability `difficulty`, a weaker distractor
//! motif borrowed from another class. `cue_extent` controls how much frequency context a
//! classifier needs.

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f32::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Time frames.
    pub t: usize,
    /// Frequency bins.
    pub f: usize,
    /// 0 = clean, 1 = heavy noise, amplitude spread and frequent distractors.
    pub difficulty: f32,
    /// Bands per motif.
    pub bands: usize,
    /// Frequency span of a motif as a fraction of `f`.
    pub cue_extent: f32,
    /// Mean band width in bins (Gaussian sigma); each class draws from 0.6x to 1.4x of it.
    pub band_width: f32,
    /// 0 = motif always at the centre, 1 = anywhere along frequency.
    pub position_jitter: f32,
    /// Short motif events per sample; 0 renders one motif over the whole clip instead.
    /// Each event belongs to the sample's class with probability `1 - difficulty / 2`,
    /// otherwise to a random other class, so the label is a local texture statistic.
    pub events: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            train_per_class: 32,
            test_per_class: 16,
            t: 64,
            f: 64,
            difficulty: 0.5,
            bands: 3,
            cue_extent: 0.15,
            band_width: 1.0,
            position_jitter: 1.0,
            events: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Motif {
    /// Band centres relative to the motif start, in bins.
    offsets: Vec<f32>,
    width: f32,
    rate: f32,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_classes < 2 {
            errs.push(format!("data.num_classes = {} must be >= 2", self.num_classes));
        }
        if self.train_per_class == 0 {
            errs.push("data.train_per_class must be >= 1".to_string());
        }
        if self.t < 4 || self.f < 8 {
            errs.push(format!("synthetic spectrogram {}x{} is too small (min 4x8)", self.t, self.f));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            errs.push(format!("data.difficulty = {} must lie in [0, 1]", self.difficulty));
        }
        if self.bands == 0 {
            errs.push("data.bands must be >= 1".to_string());
        }
        if !(self.cue_extent > 0.0 && self.cue_extent <= 1.0) {
            errs.push(format!("data.cue_extent = {} must lie in (0, 1]", self.cue_extent));
        }
        if !(self.band_width > 0.0 && self.band_width.is_finite()) {
            errs.push(format!("data.band_width = {} must be positive", self.band_width));
        }
        if !(0.0..=1.0).contains(&self.position_jitter) {
            errs.push(format!("data.position_jitter = {} must lie in [0, 1]", self.position_jitter));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn extent(&self) -> f32 {
        (self.cue_extent * self.f as f32).max(1.0)
    }

    fn motifs(&self, rng: &mut ChaCha8Rng) -> Vec<Motif> {
        let e = self.extent();
        (0..self.num_classes)
            .map(|_| {
                let mut offsets: Vec<f32> = (0..self.bands).map(|_| rng.gen_range(0.0..=e)).collect();
                offsets.sort_by(f32::total_cmp);
                Motif { offsets, width: self.band_width * rng.gen_range(0.6..1.4), rate: rng.gen_range(1..=5) as f32 }
            })
            .collect()
    }

    /// Start bin of a motif placed by `u` in [0, 1).
    fn position(&self, u: f32) -> f32 {
        let room = (self.f as f32 - 1.0 - self.extent()).max(0.0);
        room * (0.5 + self.position_jitter * (u - 0.5))
    }
}

fn render(m: &Motif, amp: f32, start: f32, phase: f32, t: usize, f: usize, out: &mut [f32]) {
    render_span(m, amp, start, phase, (0, t), t, f, out);
}

/// Renders `m` over the frames `span.0..span.1` only; `m.rate` cycles take `t` frames.
#[allow(clippy::too_many_arguments)]
fn render_span(m: &Motif, amp: f32, start: f32, phase: f32, span: (usize, usize), t: usize, f: usize, out: &mut [f32]) {
    for ti in span.0..span.1 {
        let pulse = 0.55 + 0.45 * (2.0 * PI * m.rate * ti as f32 / t as f32 + phase).sin();
        for off in &m.offsets {
            let centre = start + off;
            let lo = (centre - 4.0 * m.width).floor().max(0.0) as usize;
            let hi = ((centre + 4.0 * m.width).ceil().max(0.0) as usize).min(f - 1);
            for fi in lo..=hi {
                let d = (fi as f32 - centre) / m.width;
                out[ti * f + fi] += amp * pulse * (-0.5 * d * d).exp();
            }
        }
    }
}

/// Class-balanced train and test halves, deterministic in `cfg.seed`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Split> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motifs = cfg.motifs(&mut rng);
    let (t, f) = (cfg.t, cfg.f);
    let d = cfg.difficulty;
    let noise = 0.1 + 0.9 * d;
    let make = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut ds = Dataset::new([2, t, f], cfg.num_classes);
        for i in 0..per_class * cfg.num_classes {
            let label = i % cfg.num_classes;
            let amp = 2.0 * rng.gen_range(1.0 - 0.5 * d..=1.0);
            let mut clean = vec![0.0f32; t * f];
            if cfg.events > 0 {
                let len = (t / 4).max(1);
                for _ in 0..cfg.events {
                    let class = if rng.gen::<f32>() < 1.0 - 0.5 * d {
                        label
                    } else {
                        (label + rng.gen_range(1..cfg.num_classes)) % cfg.num_classes
                    };
                    let t0 = rng.gen_range(0..=t - len);
                    let s = cfg.position(rng.gen());
                    render_span(&motifs[class], amp, s, rng.gen_range(0.0..2.0 * PI), (t0, t0 + len), len, f, &mut clean);
                }
            } else {
                let start = cfg.position(rng.gen());
                render(&motifs[label], amp, start, rng.gen_range(0.0..2.0 * PI), t, f, &mut clean);
            }
            if cfg.events == 0 && rng.gen::<f32>() < d {
                let other = (label + rng.gen_range(1..cfg.num_classes)) % cfg.num_classes;
                let s2 = cfg.position(rng.gen());
                render(&motifs[other], 0.5 * amp, s2, rng.gen_range(0.0..2.0 * PI), t, f, &mut clean);
            }
            let mut data = Vec::with_capacity(2 * t * f);
            for ch in 0..2 {
                let gain = if ch == 0 { 1.0 } else { rng.gen_range(0.8..1.2) };
                data.extend(clean.iter().map(|v| {
                    let z: f32 = StandardNormal.sample(rng);
                    gain * v + noise * z
                }));
            }
            ds.push(&Tensor::from_vec(&[2, t, f], data)?, label)?;
        }
        Ok(ds)
    };
    let train = make(cfg.train_per_class, &mut rng)?;
    let test = make(cfg.test_per_class, &mut rng)?;
    Ok(Split { train, test })
}
