//! Training runs and sweeps.

use crate::checkpoint::{network_checkpoint, write_atomic};
use crate::config::{DataSource, ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::features::{extract_manifest, load_manifest, synth_dataset, Dataset, Split};
use crate::model::{build_initialized, ModelSummary, Network};
use crate::ops::norm::Mode;
use crate::ops::{argmax_rows, softmax_cross_entropy, Sgd};
use crate::pruning::{enforce_masks, PruneState};
use crate::rf::RFResult;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Final accuracy is the mean test accuracy over this many trailing epochs.
pub const FINAL_WINDOW: usize = 10;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub nonzero_params: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub initial_summary: ModelSummary,
    pub final_summary: ModelSummary,
    pub rf: RFResult,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,test_loss,test_acc,nonzero_params,pruned\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.train_acc, e.test_loss, e.test_acc, e.nonzero_params, e.pruned
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `report.out_dir`; `None` with `write = false` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub write: bool,
    pub strict: bool,
    /// Pre-loaded data, bypassing `config.data`.
    pub data: Option<Split>,
    /// Progress lines on standard error.
    pub verbose: bool,
}

/// Loads the configured data and normalizes it with training-split statistics.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Split> {
    let split = match cfg.data.source {
        DataSource::Synthetic => synth_dataset(&cfg.data.synth)?,
        DataSource::Manifest => {
            let path = cfg.data.manifest.as_ref().ok_or_else(|| Error::invalid("data.manifest is not set"))?;
            extract_manifest(&load_manifest(path)?, &cfg.data.features)?.0
        }
    };
    Ok(split.normalized().0)
}

fn evaluate(net: &mut Network, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk)?;
        let logits = net.forward(&x, Mode::Eval)?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += l as f64 * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

fn run_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out_dir.clone().unwrap_or_else(|| cfg.report.out_dir.clone()).join(&cfg.name)
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, rec: &RunRecord, net: &Network, prune: Option<&PruneState>) -> Result<()> {
    write_atomic(&dir.join("record.csv"), rec.to_csv().as_bytes())?;
    write_atomic(&dir.join("summary.csv"), rec.final_summary.to_csv().as_bytes())?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    if cfg.report.checkpoint {
        save_checkpoint(dir, cfg, net, prune)?;
    }
    Ok(())
}

fn save_checkpoint(dir: &Path, cfg: &ExperimentConfig, net: &Network, prune: Option<&PruneState>) -> Result<()> {
    let meta = BTreeMap::from([("name".to_string(), cfg.name.clone()), ("seed".to_string(), cfg.seed.to_string())]);
    network_checkpoint(net, prune, meta).save(&dir.join("model.ckpt"))
}

/// Trains one configuration. Deterministic in `cfg.seed`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let split = match &opts.data {
        Some(s) => s.clone(),
        None => load_data(cfg)?,
    };
    let mut spec = cfg.arch_spec();
    spec.num_classes = split.train.num_classes;
    spec.in_channels = split.train.sample_shape[0];
    let mut net = build_initialized(&spec, cfg.seed)?;
    let initial_summary = net.summarize()?;
    let mut prune = if cfg.prune.enabled { Some(PruneState::new(&net, &cfg.prune)?) } else { None };
    let dir = run_dir(cfg, opts);
    let o = cfg.optimizer;
    let schedule = o.schedule();
    let mut opt = Sgd::new(o.momentum, o.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut epochs = Vec::with_capacity(o.epochs);
    let mut last_good = net.clone();

    for epoch in 0..o.epochs {
        if let Some(p) = prune.as_mut() {
            p.step_epoch(&mut net, epoch)?;
        }
        let lr = schedule.at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(o.batch_size) {
            let (x, y) = split.train.batch(chunk)?;
            net.zero_grad();
            let logits = net.forward(&x, Mode::Train)?;
            let (loss, g) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                if opts.write {
                    save_checkpoint(&dir, cfg, &last_good, prune.as_ref())?;
                }
                return Err(Error::NonFinite(format!("loss became {loss} in epoch {epoch}; last good weights kept")));
            }
            net.backward(&g)?;
            let mut step_err = None;
            net.visit_params_mut(&mut |name, _, t| {
                if step_err.is_none() {
                    step_err = opt.step(name, t, lr).err();
                }
            });
            if let Some(e) = step_err {
                if opts.write {
                    save_checkpoint(&dir, cfg, &last_good, prune.as_ref())?;
                }
                return Err(e);
            }
            if let Some(p) = &prune {
                enforce_masks(&mut net, p);
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
        }
        let (test_loss, test_acc) = evaluate(&mut net, &split.test)?;
        let s = net.summarize()?;
        let n = split.train.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_loss,
            test_acc,
            nonzero_params: s.nonzero_params,
            pruned: prune.as_ref().map_or(0, |p| p.pruned()),
        };
        if opts.verbose {
            eprintln!(
                "[{}] epoch {epoch}: loss {:.4} acc {:.3} test {:.3} nonzero {}",
                cfg.name, rec.train_loss, rec.train_acc, rec.test_acc, rec.nonzero_params
            );
        }
        epochs.push(rec);
        last_good.clone_from(&net);
    }
    if let Some(p) = prune.as_mut() {
        p.step_epoch(&mut net, o.epochs)?;
    }
    let final_accuracy = if epochs.is_empty() {
        evaluate(&mut net, &split.test)?.1
    } else {
        let tail = &epochs[epochs.len().saturating_sub(FINAL_WINDOW)..];
        tail.iter().map(|e| e.test_acc).sum::<f64>() / tail.len() as f64
    };
    let final_summary = net.summarize()?;
    let rec = RunRecord {
        name: cfg.name.clone(),
        seed: cfg.seed,
        epochs,
        final_accuracy,
        rf: final_summary.rf,
        initial_summary,
        final_summary,
    };
    if opts.write {
        write_outputs(&dir, cfg, &rec, &net, prune.as_ref())?;
    }
    Ok(rec)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub rho: usize,
    pub variant: String,
    pub width: usize,
    pub seed: u64,
}

impl SweepCell {
    pub fn name(&self) -> String {
        format!("rho{}_{}_w{}_s{}", self.rho, self.variant.replace('+', "-"), self.width, self.seed)
    }

    pub fn config(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        c.arch.rho = self.rho;
        c.arch.base_channels = self.width;
        c.seed = self.seed;
        Variant::parse(&self.variant)?.apply(&mut c);
        c.name = self.name();
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cell: SweepCell,
    pub record: std::result::Result<RunRecord, String>,
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<SweepCell> {
    let s = &cfg.sweep;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let rhos = or(&s.rhos, cfg.arch.rho);
    let widths = or(&s.widths, cfg.arch.base_channels);
    let variants = if s.variants.is_empty() { vec!["undamped".to_string()] } else { s.variants.clone() };
    let seeds = if s.seeds.is_empty() { vec![cfg.seed] } else { s.seeds.clone() };
    let mut cells = Vec::new();
    for &rho in &rhos {
        for v in &variants {
            for &width in &widths {
                for &seed in &seeds {
                    cells.push(SweepCell { rho, variant: v.clone(), width, seed });
                }
            }
        }
    }
    cells
}

/// Runs every cell; a failing cell is recorded and the sweep continues. Writes
/// `<out>/<name>/sweep.csv` with one row per cell.
pub fn sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SweepResult>> {
    cfg.validate()?;
    let cells = sweep_cells(cfg);
    let data = match &opts.data {
        Some(d) => Some(d.clone()),
        None if cfg.data.source == DataSource::Manifest => Some(load_data(cfg)?),
        None => None,
    };
    let out_root = run_dir(cfg, opts);
    let one = |cell: &SweepCell| -> SweepResult {
        let record = cell.config(cfg).and_then(|c| {
            let o = RunOptions {
                out_dir: Some(out_root.clone()),
                write: opts.write,
                strict: opts.strict,
                data: data.clone(),
                verbose: opts.verbose,
            };
            run(&c, &o)
        });
        SweepResult { cell: cell.clone(), record: record.map_err(|e| e.to_string()) }
    };
    let results: Vec<SweepResult> = if cfg.sweep.parallel && !opts.strict {
        cells.par_iter().map(one).collect()
    } else {
        cells.iter().map(one).collect()
    };
    check_rf_depends_on_rho_only(&results)?;
    if opts.write {
        write_atomic(&out_root.join("sweep.csv"), sweep_csv(&results).as_bytes())?;
    }
    Ok(results)
}

/// The receptive field of every successful cell must be a function of ρ and width-free
/// geometry alone.
fn check_rf_depends_on_rho_only(results: &[SweepResult]) -> Result<()> {
    let mut seen: BTreeMap<usize, RFResult> = BTreeMap::new();
    for r in results {
        if let Ok(rec) = &r.record {
            if let Some(prev) = seen.insert(r.cell.rho, rec.rf) {
                if prev != rec.rf {
                    return Err(Error::State(format!("rho {}: receptive field differs across variants", r.cell.rho)));
                }
            }
        }
    }
    Ok(())
}

pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut s = String::from("rho,variant,width,seed,status,final_accuracy,total_params,nonzero_params,rf_t,rf_f,error\n");
    for r in results {
        let c = &r.cell;
        match &r.record {
            Ok(rec) => s.push_str(&format!(
                "{},{},{},{},ok,{},{},{},{},{},\n",
                c.rho,
                c.variant,
                c.width,
                c.seed,
                rec.final_accuracy,
                rec.final_summary.total_params,
                rec.final_summary.nonzero_params,
                rec.rf.rf_t,
                rec.rf.rf_f
            )),
            Err(e) => s.push_str(&format!(
                "{},{},{},{},failed,,,,,,\"{}\"\n",
                c.rho,
                c.variant,
                c.width,
                c.seed,
                e.replace('"', "'")
            )),
        }
    }
    s
}
