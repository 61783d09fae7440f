//! Experiment configuration, read from TOML (`key = value` lines under `[section]` headers).
//!
//! ```toml
//! name = "damped_rho7"
//! seed = 1
//!
//! [arch]
//! base_channels = 128
//! rho = 7
//!
//! [damping]
//! enabled = true
//! lambda = 0.1
//!
//! [decomp]
//! enabled = false
//! Z = 4
//!
//! [prune]
//! enabled = false
//! target_nonzero = 400000
//!
//! [data]
//! source = "synthetic"
//!
//! [optimizer]
//! epochs = 120
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use crate::damping::DampingSpec;
use crate::decomposition::DecompSpec;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, SynthConfig};
use crate::model::ArchSpec;
use crate::ops::LrSchedule;
use crate::pruning::PruneConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// `path,label,split` CSV, required when `source = "manifest"`.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_epochs: usize,
    pub step_epochs: usize,
    pub decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let s = LrSchedule::default();
        Self {
            epochs: 120,
            batch_size: 32,
            lr: s.lr,
            warmup_epochs: s.warmup_epochs,
            step_epochs: s.step_epochs,
            decay: s.decay,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { lr: self.lr, warmup_epochs: self.warmup_epochs, step_epochs: self.step_epochs, decay: self.decay }
    }
}

/// Grid for `sweep`. An empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub rhos: Vec<usize>,
    /// `undamped`, `damped`, `decomp`, `pruned` or `+`-joined combinations.
    pub variants: Vec<String>,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Run cells concurrently (ignored under strict determinism).
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Runs are written to `<out_dir>/<name>/`.
    pub out_dir: PathBuf,
    pub checkpoint: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs"), checkpoint: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub arch: ArchSpec,
    pub damping: DampingSpec,
    pub decomp: DecompSpec,
    pub prune: PruneConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            arch: ArchSpec::default(),
            damping: DampingSpec::default(),
            decomp: DecompSpec::default(),
            prune: PruneConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            sweep: SweepConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Switches a sweep variant turns on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Variant {
    pub damped: bool,
    pub decomp: bool,
    pub pruned: bool,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        for part in s.split('+').map(str::trim) {
            match part {
                "undamped" | "baseline" | "plain" => {}
                "damped" => v.damped = true,
                "decomp" | "decomposed" => v.decomp = true,
                "pruned" => v.pruned = true,
                other => return Err(Error::Config(format!("unknown variant `{other}` in `{s}`"))),
            }
        }
        Ok(v)
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.damping.enabled |= self.damped;
        cfg.decomp.enabled |= self.decomp;
        cfg.prune.enabled |= self.pruned;
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The architecture with damping and decomposition switches folded in.
    pub fn arch_spec(&self) -> ArchSpec {
        let mut a = self.arch.clone();
        a.damping = self.damping;
        a.decomp = self.decomp;
        if self.data.source == DataSource::Synthetic {
            a.num_classes = self.data.synth.num_classes;
        }
        a
    }

    /// Every problem found, as one validation error.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut take = |r: Result<()>| match r {
            Err(Error::Validation(v)) => errs.extend(v),
            Err(e) => errs.push(e.to_string()),
            Ok(()) => {}
        };
        take(self.arch_spec().validate());
        if self.damping.enabled {
            take(self.damping.validate());
        }
        if self.decomp.z == 0 {
            take(Err(Error::invalid("decomp.Z must be >= 1")));
        }
        match self.data.source {
            DataSource::Synthetic => take(self.data.synth.validate()),
            DataSource::Manifest => {
                if self.data.manifest.is_none() {
                    take(Err(Error::invalid("data.manifest is required when data.source = \"manifest\"")));
                }
                take(self.data.features.validate());
            }
        }
        let o = &self.optimizer;
        if o.batch_size == 0 {
            take(Err(Error::invalid("optimizer.batch_size must be >= 1")));
        }
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            take(Err(Error::invalid(format!("optimizer.lr = {} must be finite and >= 0", o.lr))));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            take(Err(Error::invalid(format!("optimizer.momentum = {} must lie in [0, 1)", o.momentum))));
        }
        if o.weight_decay < 0.0 {
            take(Err(Error::invalid("optimizer.weight_decay must be >= 0")));
        }
        for v in &self.sweep.variants {
            take(Variant::parse(v).map(|_| ()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            take(Err(Error::invalid(format!("name `{}` must be non-empty without path separators", self.name))));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}
