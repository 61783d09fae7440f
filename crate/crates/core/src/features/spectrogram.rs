//! Resampling, STFT, A-weighting and mel pooling.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side.
const SINC_ZEROS: usize = 16;

/// Band-limited resampling with a Hann-windowed sinc kernel. Cut-off is the lower of the
/// two Nyquist frequencies.
pub fn resample(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let half = SINC_ZEROS as f64 / cutoff;
    let n_out = ((x.len() as f64) * ratio).floor() as usize;
    (0..n_out)
        .map(|i| {
            let centre = i as f64 / ratio;
            let lo = (centre - half).ceil().max(0.0) as usize;
            let hi = ((centre + half).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0f64;
            for (j, s) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = centre - j as f64;
                let arg = d * cutoff;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let win = 0.5 + 0.5 * (PI * d / half).cos();
                acc += *s as f64 * cutoff * sinc * win;
            }
            acc as f32
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / hop + 1
    }
}

/// One-sided power spectrogram `[frames][window/2 + 1]`, frames without centering padding.
pub fn stft_power(x: &[f32], window: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 || hop == 0 || hop > window {
        return Err(Error::invalid(format!("need 0 < hop <= window, got window {window}, hop {hop}")));
    }
    let frames = frame_count(x.len(), window, hop);
    if frames == 0 {
        return Err(Error::invalid(format!("{} samples is shorter than one window of {window}", x.len())));
    }
    let w = hann(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut out = Vec::with_capacity(frames);
    for fr in 0..frames {
        let seg = &x[fr * hop..fr * hop + window];
        for ((b, s), wi) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex::new(*s as f64 * wi, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..=window / 2].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

/// A-weighting gain in dB (IEC 61672 curve, 0 dB at 1 kHz).
pub fn a_weighting_db(f: f64) -> f64 {
    if f <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let f2 = f * f;
    let num = 12194.0f64.powi(2) * f2 * f2;
    let den = (f2 + 20.6f64.powi(2))
        * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
        * (f2 + 12194.0f64.powi(2));
    20.0 * (num / den).log10() + 2.0
}

/// Linear power gain per STFT bin.
pub fn a_weighting_power(window: usize, sample_rate: u32) -> Vec<f64> {
    (0..=window / 2)
        .map(|k| {
            let db = a_weighting_db(k as f64 * sample_rate as f64 / window as f64);
            if db.is_finite() {
                10f64.powf(db / 10.0)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with peak 1, centres equally spaced on the mel scale between `fmin`
/// and `fmax`. A filter too narrow to cover any bin gets weight 1 on its nearest bin.
#[derive(Debug, Clone)]
pub struct MelBank {
    pub centres_hz: Vec<f64>,
    /// `[n_mels][window/2 + 1]`.
    pub weights: Vec<Vec<f64>>,
}

impl MelBank {
    pub fn new(n_mels: usize, window: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::invalid("n_mels must be >= 1"));
        }
        if !(fmin >= 0.0 && fmax > fmin && fmax <= sample_rate as f64 / 2.0) {
            return Err(Error::invalid(format!("mel range [{fmin}, {fmax}] Hz is invalid at {sample_rate} Hz")));
        }
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
        let bins = window / 2 + 1;
        let bin_hz = sample_rate as f64 / window as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut row: Vec<f64> = (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                    })
                    .collect();
                if row.iter().all(|w| *w == 0.0) {
                    row[((c / bin_hz).round() as usize).min(bins - 1)] = 1.0;
                }
                row
            })
            .collect();
        Ok(Self { centres_hz: edges[1..=n_mels].to_vec(), weights })
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum()).collect()
    }

    /// Index of the filter whose centre is closest to `hz`.
    pub fn nearest(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centres_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centres_hz[best] - hz).abs() {
                best = i;
            }
        }
        best
    }
}
