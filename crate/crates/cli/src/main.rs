//! `rfdamp`: train, sweep and inspect receptive-field regularized networks.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, spec), 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use rfdamp_core::checkpoint::{restore_network, write_atomic, Checkpoint};
use rfdamp_core::config::ExperimentConfig;
use rfdamp_core::erf::{measure_erf, probe_batch, probe_extent, DEFAULT_FRACTION, DEFAULT_PROBE_BATCH};
use rfdamp_core::features::{extract_manifest, load_manifest, logmel_from_wav, parse_wav};
use rfdamp_core::model::{build, build_initialized, ArchSpec};
use rfdamp_core::pruning::PruneState;
use rfdamp_core::rf::{spatial_block_convs, MAX_RHO};
use rfdamp_core::train::{run, sweep, sweep_csv, RunOptions};
use rfdamp_core::{Error, Result, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "rfdamp", version, about = "Receptive-field regularized CNNs for audio classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, where a subcommand writes a single artifact).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded execution for bitwise-reproducible results.
    #[arg(long, global = true)]
    strict_determinism: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration; writes record.csv, summary.csv and model.ckpt.
    Train {
        #[arg(long)]
        quiet: bool,
    },
    /// Run the configured grid; writes one run per cell plus sweep.csv.
    Sweep {
        #[arg(long)]
        quiet: bool,
    },
    /// Per-tensor parameter counts as CSV.
    Summarize {
        /// Count non-zeros of trained weights instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Receptive field for every rho of the configured architecture.
    RfTable,
    /// Effective receptive field energy map as CSV, summary as the last line.
    Erf {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PROBE_BATCH)]
        batch: usize,
        /// Probe input extent per axis; defaults to one that fits the theoretical RF.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_FRACTION)]
        fraction: f64,
    },
    /// Extract log-mel features from a WAV file or the configured manifest into a checkpoint
    /// container.
    Features {
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Pruned-count schedule per epoch as CSV.
    PrunePlan {
        /// Non-zero parameter target; defaults to prune.target_nonzero.
        #[arg(long)]
        target: Option<usize>,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, default_name: &str, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            let path = if p.extension().is_some() { p.to_path_buf() } else { p.join(default_name) };
            write_atomic(&path, text.as_bytes())?;
            eprintln!("wrote {}", path.display());
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_options(g: &Global, quiet: bool) -> RunOptions {
    RunOptions { out_dir: g.out.clone(), write: true, strict: g.strict_determinism, data: None, verbose: !quiet }
}

fn network_for(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<rfdamp_core::model::Network> {
    let spec = cfg.arch_spec();
    match checkpoint {
        Some(p) => {
            let mut net = build(&spec)?;
            restore_network(&Checkpoint::load(p)?, &mut net)?;
            Ok(net)
        }
        None => build_initialized(&spec, cfg.seed),
    }
}

fn rf_table(spec: &ArchSpec) -> Result<String> {
    let mut s = String::from("rho,spatial_convs,rf_t,rf_f\n");
    for rho in 0..=MAX_RHO {
        let r = ArchSpec { rho, ..spec.clone() }.max_rf()?;
        s.push_str(&format!("{rho},{},{},{}\n", spatial_block_convs(rho, spec.num_blocks)?, r.rf_t, r.rf_f));
    }
    Ok(s)
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::Train { quiet } => {
            let rec = run(&cfg, &run_options(g, quiet))?;
            println!(
                "{} final_accuracy={} nonzero_params={} total_params={}",
                rec.name, rec.final_accuracy, rec.final_summary.nonzero_params, rec.final_summary.total_params
            );
        }
        Command::Sweep { quiet } => {
            let res = sweep(&cfg, &run_options(g, quiet))?;
            for r in &res {
                if let Err(e) = &r.record {
                    eprintln!("cell {} failed: {e}", r.cell.name());
                }
            }
            print!("{}", sweep_csv(&res));
        }
        Command::Summarize { checkpoint } => {
            cfg.validate()?;
            let s = network_for(&cfg, checkpoint.as_deref())?.summarize()?;
            emit(g.out.as_deref(), "summary.csv", &s.to_csv())?;
        }
        Command::RfTable => {
            let spec = cfg.arch_spec();
            spec.validate()?;
            emit(g.out.as_deref(), "rf_table.csv", &rf_table(&spec)?)?;
        }
        Command::Erf { checkpoint, batch, size, fraction } => {
            cfg.validate()?;
            if batch == 0 {
                return Err(Error::invalid("--batch must be >= 1"));
            }
            let mut net = network_for(&cfg, checkpoint.as_deref())?;
            let rf = net.summarize()?.rf;
            let n = size.unwrap_or_else(|| probe_extent(rf.rf_t.max(rf.rf_f), rf.jump_t.max(rf.jump_f)));
            let x = probe_batch(batch, cfg.arch.in_channels, n, n, cfg.seed);
            let r = measure_erf(&mut net, &x, fraction)?;
            if r.clipped {
                eprintln!("warning: theoretical RF {}x{} exceeds the {n}x{n} probe input; widths are clipped", rf.rf_t, rf.rf_f);
            }
            let text = format!("{}# {}\n", r.to_csv(), r.summary_line());
            emit(g.out.as_deref(), "erf.csv", &text)?;
            if g.out.is_some() {
                println!("{}", r.summary_line());
            }
        }
        Command::Features { wav, manifest } => {
            let fc = &cfg.data.features;
            fc.validate()?;
            let mut ck = Checkpoint::default();
            if let Some(w) = wav {
                let x = logmel_from_wav(&parse_wav(&std::fs::read(&w)?)?, fc)?;
                ck.push("logmel", &x);
            } else {
                let path = manifest
                    .or_else(|| cfg.data.manifest.clone())
                    .ok_or_else(|| Error::invalid("features needs --wav, --manifest or data.manifest"))?;
                let (split, classes) = extract_manifest(&load_manifest(&path)?, fc)?;
                for (name, ds) in [("train", &split.train), ("test", &split.test)] {
                    if ds.is_empty() {
                        continue;
                    }
                    let [c, t, f] = ds.sample_shape;
                    ck.push(format!("{name}.x"), &Tensor::from_vec(&[ds.len(), c, t, f], ds.data.clone())?);
                    ck.push(format!("{name}.y"), &Tensor::from_vec(&[ds.len()], ds.labels.iter().map(|l| *l as f32).collect())?);
                }
                ck.meta = BTreeMap::from([("classes".to_string(), classes.join(","))]);
            }
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("features.ckpt"));
            let out = if out.extension().is_some() { out } else { out.join("features.ckpt") };
            ck.save(&out)?;
            for (name, t) in &ck.tensors {
                println!("{name} {:?}", t.shape());
            }
        }
        Command::PrunePlan { target } => {
            let mut pc = cfg.prune;
            if let Some(t) = target {
                pc.target_nonzero = t;
            }
            cfg.validate()?;
            let net = build(&cfg.arch_spec())?;
            let st = PruneState::new(&net, &pc)?;
            let total = st.total_prunable() + st.exempt();
            let mut s = String::from("epoch,pruned,nonzero_params\n");
            for e in 0..=pc.ramp_epochs {
                let p = st.scheduled(e)?;
                s.push_str(&format!("{e},{p},{}\n", total - p));
            }
            emit(g.out.as_deref(), "prune_plan.csv", &s)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.strict_determinism {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
