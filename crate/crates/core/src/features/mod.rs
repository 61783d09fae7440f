//! Log-mel features from PCM audio, train-split normalization, CSV manifests and a synthetic
//! spectrogram task.

pub mod spectrogram;
pub mod synth;
pub mod wav;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spectrogram::{a_weighting_power, resample, stft_power, MelBank};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
pub use synth::{synth_dataset, SynthConfig};
pub use wav::{parse_wav, write_wav, Wav};

/// Added before the logarithm; digital silence maps to `ln(LOG_FLOOR)`.
pub const LOG_FLOOR: f64 = 1e-10;
/// Lower bound on per-bin standard deviation during normalization.
pub const STD_FLOOR: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to the Nyquist frequency.
    pub fmax: Option<f64>,
    /// Pad with silence or truncate to this length after resampling.
    pub snippet_seconds: Option<f64>,
    pub channels: usize,
    /// A-weighting of the power spectrum before mel pooling.
    pub perceptual_weighting: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22_050,
            window: 2048,
            hop: 512,
            n_mels: 256,
            fmin: 0.0,
            fmax: None,
            snippet_seconds: None,
            channels: 2,
            perceptual_weighting: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.sample_rate == 0 {
            errs.push("features.sample_rate must be > 0".to_string());
        }
        if self.window == 0 || self.hop == 0 || self.hop > self.window {
            errs.push(format!("features need 0 < hop <= window (hop {}, window {})", self.hop, self.window));
        }
        if self.n_mels == 0 {
            errs.push("features.n_mels must be >= 1".to_string());
        }
        if self.channels != 2 {
            errs.push(format!("features.channels = {} but the extractor produces 2", self.channels));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn mel_bank(&self) -> Result<MelBank> {
        let fmax = self.fmax.unwrap_or(self.sample_rate as f64 / 2.0);
        MelBank::new(self.n_mels, self.window, self.sample_rate, self.fmin, fmax)
    }
}

/// `[channel][sample]` floats → `[2, T, n_mels]`. Mono is duplicated; each channel is
/// processed on its own.
fn channels_to_logmel(chans: Vec<Vec<f32>>, rate: u32, cfg: &FeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let chans = match chans.len() {
        1 => vec![chans[0].clone(), chans[0].clone()],
        2 => chans,
        n => return Err(Error::invalid(format!("expected mono or stereo audio, got {n} channels"))),
    };
    if chans[0].is_empty() {
        return Err(Error::invalid("empty audio"));
    }
    let bank = cfg.mel_bank()?;
    let gain = cfg.perceptual_weighting.then(|| a_weighting_power(cfg.window, cfg.sample_rate));
    let mut data = Vec::new();
    let mut frames = 0;
    for ch in chans {
        let mut x = resample(&ch, rate, cfg.sample_rate);
        if let Some(s) = cfg.snippet_seconds {
            x.resize((s * cfg.sample_rate as f64).round() as usize, 0.0);
        }
        let spec = stft_power(&x, cfg.window, cfg.hop)?;
        frames = spec.len();
        for mut p in spec {
            if let Some(g) = &gain {
                p.iter_mut().zip(g).for_each(|(a, b)| *a *= b);
            }
            data.extend(bank.apply(&p).into_iter().map(|m| (m + LOG_FLOOR).ln() as f32));
        }
    }
    Tensor::from_vec(&[2, frames, cfg.n_mels], data)
}

/// Interleaved 16-bit PCM at any rate → `[2, T, n_mels]` log-mel spectrogram with
/// `T = floor((samples - window) / hop) + 1` after resampling.
pub fn wav_to_logmel(pcm: &[i16], channels: usize, sample_rate: u32, cfg: &FeatureConfig) -> Result<Tensor> {
    if channels == 0 {
        return Err(Error::invalid("zero channels"));
    }
    let w = Wav { sample_rate, channels: channels as u16, samples: pcm.to_vec() };
    channels_to_logmel((0..channels).map(|c| w.channel(c)).collect(), sample_rate, cfg)
}

pub fn logmel_from_wav(wav: &Wav, cfg: &FeatureConfig) -> Result<Tensor> {
    wav_to_logmel(&wav.samples, wav.channels as usize, wav.sample_rate, cfg)
}

/// Labeled samples of identical shape `[C, T, F]`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: [usize; 3], num_classes: usize) -> Self {
        Self { sample_shape, data: Vec::new(), labels: Vec::new(), num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn push(&mut self, x: &Tensor, label: usize) -> Result<()> {
        if x.shape() != self.sample_shape {
            return Err(Error::dim(format!("sample shape {:?} differs from dataset shape {:?}", x.shape(), self.sample_shape)));
        }
        if label >= self.num_classes {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", self.num_classes)));
        }
        self.data.extend_from_slice(x.data());
        self.labels.push(label);
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// `[indices.len(), C, T, F]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(self.sample(i));
        }
        let [c, t, f] = self.sample_shape;
        Ok((Tensor::from_vec(&[indices.len(), c, t, f], data)?, indices.iter().map(|i| self.labels[*i]).collect()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for l in &self.labels {
            c[*l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Split {
    /// Normalizes both halves with statistics of the training half only.
    pub fn normalized(mut self) -> (Split, DatasetStats) {
        let stats = DatasetStats::compute(&self.train);
        stats.apply_in_place(&mut self.train);
        stats.apply_in_place(&mut self.test);
        (self, stats)
    }
}

/// Mean and standard deviation per (channel, frequency bin), pooled over samples and time.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub channels: usize,
    pub bins: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl DatasetStats {
    pub fn identity(channels: usize, bins: usize) -> Self {
        Self { channels, bins, mean: vec![0.0; channels * bins], std: vec![1.0; channels * bins] }
    }

    pub fn compute(train: &Dataset) -> Self {
        let [c, t, f] = train.sample_shape;
        let mut sum = vec![0.0f64; c * f];
        let mut sq = vec![0.0f64; c * f];
        for i in 0..train.len() {
            for (ch, plane) in train.sample(i).chunks_exact(t * f).enumerate() {
                for row in plane.chunks_exact(f) {
                    for (k, v) in row.iter().enumerate() {
                        sum[ch * f + k] += *v as f64;
                        sq[ch * f + k] += (*v as f64).powi(2);
                    }
                }
            }
        }
        let n = (train.len() * t).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR))
            .collect();
        Self { channels: c, bins: f, mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    fn normalize_slice(&self, x: &mut [f32]) {
        let f = self.bins;
        let plane = x.len() / self.channels;
        for (ch, p) in x.chunks_exact_mut(plane).enumerate() {
            for row in p.chunks_exact_mut(f) {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.mean[ch * f + k]) / self.std[ch * f + k];
                }
            }
        }
    }

    pub fn apply_in_place(&self, ds: &mut Dataset) {
        let n = ds.sample_len();
        for s in ds.data.chunks_exact_mut(n) {
            self.normalize_slice(s);
        }
    }
}

/// `(x - mean) / std` per bin for a `[C, T, F]` or `[N, C, T, F]` tensor.
pub fn normalize(x: &Tensor, stats: &DatasetStats) -> Result<Tensor> {
    let s = x.shape();
    let (c, f) = match s.len() {
        3 => (s[0], s[2]),
        4 => (s[1], s[3]),
        _ => return Err(Error::dim(format!("normalize expects [C,T,F] or [N,C,T,F], got {s:?}"))),
    };
    if c != stats.channels || f != stats.bins {
        return Err(Error::dim(format!("stats are {}x{} but input is {s:?}", stats.channels, stats.bins)));
    }
    let mut out = x.clone();
    let per = c * s[s.len() - 2] * f;
    for sample in out.data_mut().chunks_exact_mut(per) {
        stats.normalize_slice(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: String,
}

/// Reads a `path,label,split` CSV. A header line with those names is skipped; relative
/// paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        let line_start = offset;
        offset += line.len() + 1;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("path,label,split")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Parse { offset: line_start, msg: format!("line {}: expected path,label,split", i + 1) });
        }
        out.push(ManifestEntry { path: base.join(cols[0]), label: cols[1].to_string(), split: cols[2].to_string() });
    }
    Ok(out)
}

/// Extracts features for every manifest entry. Labels are indexed in sorted order; entries
/// whose split is not `train` go to the test half.
pub fn extract_manifest(entries: &[ManifestEntry], cfg: &FeatureConfig) -> Result<(Split, Vec<String>)> {
    let classes: Vec<String> = entries.iter().map(|e| e.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let feats: Vec<Tensor> = entries
        .par_iter()
        .map(|e| {
            let bytes = std::fs::read(&e.path)?;
            let wav = parse_wav(&bytes).map_err(|err| match err {
                Error::Parse { offset, msg } => Error::Parse { offset, msg: format!("{}: {msg}", e.path.display()) },
                other => other,
            })?;
            logmel_from_wav(&wav, cfg)
        })
        .collect::<Result<_>>()?;
    let shape: [usize; 3] = match feats.first() {
        Some(t) => [t.shape()[0], t.shape()[1], t.shape()[2]],
        None => return Err(Error::invalid("manifest is empty")),
    };
    let mut split = Split { train: Dataset::new(shape, classes.len()), test: Dataset::new(shape, classes.len()) };
    for (e, x) in entries.iter().zip(&feats) {
        let label = classes.binary_search(&e.label).expect("label indexed");
        let target = if e.split == "train" { &mut split.train } else { &mut split.test };
        target.push(x, label).map_err(|err| Error::invalid(format!("{}: {err} (set snippet_seconds to fix lengths)", e.path.display())))?;
    }
    Ok((split, classes))
}
