use rfdamp_core::decomposition::decomp_param_count;
use rfdamp_core::features::{write_wav, Wav};
use rfdamp_core::model::build;
use rfdamp_core::pruning::{default_gamma, schedule_pruned_count, PruneConfig, PruneState};
use rfdamp_core::config::ExperimentConfig;
use std::path::Path;
use std::process::{Command, Output};

fn rfdamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfdamp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const TINY: &str = r#"
name = "tiny"
seed = 5
[arch]
base_channels = 4
num_blocks = 3
rho = 4
[data.synth]
num_classes = 3
train_per_class = 6
test_per_class = 3
t = 16
f = 16
[optimizer]
epochs = 3
batch_size = 8
"#;

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn rf_table_has_thirteen_rows() {
    let o = rfdamp(&["rf-table"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 14);
    assert_eq!(lines[0], "rho,spatial_convs,rf_t,rf_f");
    let rfs: Vec<usize> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(rfs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn prune_plan_matches_schedule() {
    let o = rfdamp(&["prune-plan", "--target", "250000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = ExperimentConfig::default();
    let net = build(&cfg.arch_spec()).unwrap();
    let st = PruneState::new(&net, &PruneConfig { target_nonzero: 250_000, ..cfg.prune }).unwrap();
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 101);
    for (e, row) in rows.iter().enumerate() {
        let pruned: usize = row.split(',').nth(1).unwrap().parse().unwrap();
        let want = schedule_pruned_count(e, st.total_prunable(), 250_000 - st.exempt(), 100, default_gamma(100)).unwrap();
        assert_eq!(pruned, want);
    }
    assert!(rows[100].ends_with(",250000"));
}

#[test]
fn summarize_decomposed_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.toml", "[decomp]\nenabled = true\nZ = 4\n");
    let o = rfdamp(&["summarize", "--config", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut rows = std::collections::BTreeMap::new();
    for l in text.lines().skip(1) {
        let c: Vec<&str> = l.split(',').collect();
        rows.insert(c[0].to_string(), c[3].parse::<usize>().unwrap());
    }
    // Every decomposed block: reduce + core + expand (weights and biases) equals the closed form.
    let mut checked = 0;
    for name in rows.keys().filter(|n| n.ends_with(".core.weight")) {
        let unit = name.trim_end_matches(".core.weight");
        let core = rows[name];
        let reduce_w = rows[&format!("{unit}.reduce.weight")];
        let expand_w = rows[&format!("{unit}.expand.weight")];
        let mid = rows[&format!("{unit}.core.bias")];
        let c_out = rows[&format!("{unit}.expand.bias")];
        let c_in = reduce_w / mid;
        let k = ((core / (mid * mid)) as f64).sqrt() as usize;
        let got = reduce_w + core + expand_w + rows[&format!("{unit}.reduce.bias")] + mid + c_out;
        assert_eq!(got, decomp_param_count(c_in, c_out, k, 4, true).unwrap(), "{unit}");
        assert_eq!(expand_w, mid * c_out);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn exit_codes() {
    assert_eq!(rfdamp(&["rf-table", "--bogus"]).status.code(), Some(1));
    assert_eq!(rfdamp(&["nonsense"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = write_cfg(dir.path(), "bad.toml", "[arch]\nrho = 40\n");
    let o = rfdamp(&["summarize", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rho"));
    let unknown = write_cfg(dir.path(), "u.toml", "[arch]\nrhoo = 4\n");
    assert_eq!(rfdamp(&["rf-table", "--config", &unknown]).status.code(), Some(1));
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(rfdamp(&["summarize", "--checkpoint", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(rfdamp(&["--help"]).status.code(), Some(0));
}

#[test]
fn strict_train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "tiny.toml", TINY);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}"));
        let o = rfdamp(&["train", "--quiet", "--strict-determinism", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("tiny final_accuracy="));
        let rec = std::fs::read(out.join("tiny/record.csv")).unwrap();
        let ck = std::fs::read(out.join("tiny/model.ckpt")).unwrap();
        assert_eq!(String::from_utf8_lossy(&rec).lines().count(), 4);
        outputs.push((rec, ck));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn erf_and_summarize_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("o");
    assert!(rfdamp(&["train", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let ck = out.join("tiny/model.ckpt");
    let o = rfdamp(&["erf", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--batch", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("# width_t="));
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    let cols = text.lines().next().unwrap().split(',').count();
    assert_eq!(rows, cols);
    let o = rfdamp(&["summarize", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().starts_with("total,"));
}

#[test]
fn sweep_writes_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}[sweep]\nrhos = [2, 3]\nvariants = [\"undamped\", \"damped\"]\n").replace("epochs = 3", "epochs = 1");
    let cfg = write_cfg(dir.path(), "s.toml", &text);
    let out = dir.path().join("o");
    let o = rfdamp(&["sweep", "--quiet", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 5);
    assert!(out.join("tiny/sweep.csv").exists());
    assert!(out.join("tiny/rho3_damped_w4_s5/record.csv").exists());
}

#[test]
fn features_from_wav() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<i16> = (0..16_000).map(|i| ((i as f32 * 0.2).sin() * 8000.0) as i16).collect();
    let wav = dir.path().join("a.wav");
    std::fs::write(&wav, write_wav(&Wav { sample_rate: 16_000, channels: 1, samples })).unwrap();
    let out = dir.path().join("f.ckpt");
    let o = rfdamp(&["features", "--wav", wav.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), format!("logmel [2, {}, 256]", (22_050 - 2048) / 512 + 1));
    std::fs::write(&wav, b"RIFFxxxxWAVX").unwrap();
    let o = rfdamp(&["features", "--wav", wav.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte 8"));
}
