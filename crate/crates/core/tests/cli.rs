//! End-to-end runs of the `lrad` binary on a tiny synthetic fixture.

use std::path::Path;
use std::process::{Command, Output};

use lrad::cli::{EXIT_CONFIG, EXIT_DATA};

const CONFIG: &str = r#"{
  "data": { "synth": { "image_size": 16, "radius_min": 3, "radius_max": 6, "stripe_size": 6,
                       "normal_count": 96, "anomaly_count": 24, "seed": 7 } },
  "protocol": { "held_class": 1, "train_fraction": 0.67 },
  "train": { "epochs": 2, "batch_size": 16, "latent_dim": 8, "base_width": 4, "rank": 2, "seed": 7 }
}"#;

fn lrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lrad(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_and_eval(root: &Path, cfg: &Path, name: &str) -> Vec<u8> {
    let out = root.join(name);
    let ckpt = out.join("model.lrad");
    ok(&["train", "--config", s(cfg), "--out", s(&out), "--deterministic"]);
    assert!(ckpt.exists() && out.join("history.csv").exists());
    ok(&["eval", "--config", s(cfg), "--out", s(&out), "--checkpoint", s(&ckpt), "--deterministic"]);
    for f in ["scores.csv", "roc.csv", "latent3d.csv", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    std::fs::read(out.join("scores.csv")).unwrap()
}

#[test]
fn train_then_eval_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let a = train_and_eval(dir.path(), &cfg, "a");
    let b = train_and_eval(dir.path(), &cfg, "b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("id,anomaly_flag,score_latent,score_pixel\n"));
    assert_eq!(text.lines().count(), 1 + 24 + 96 - 64);
    let history = std::fs::read_to_string(dir.path().join("a/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 * 4);
}

#[test]
fn untrained_eval_writes_a_valid_curve_and_prints_the_csv_auc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("fresh");
    let stdout = ok(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    let roc = std::fs::read_to_string(out.join("roc.csv")).unwrap();
    let mut lines = roc.lines();
    assert_eq!(lines.next(), Some("fpr,tpr,threshold"));
    let pts: Vec<(f64, f64)> = lines
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            (v[0].parse().unwrap(), v[1].parse().unwrap())
        })
        .collect();
    assert_eq!(pts.first(), Some(&(0.0, 0.0)));
    assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    assert!(pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let csv_auc = metrics
        .lines()
        .find_map(|l| l.strip_prefix("auc_latent,"))
        .unwrap()
        .to_string();
    let printed = stdout
        .lines()
        .find_map(|l| l.strip_prefix("auc_latent "))
        .unwrap()
        .to_string();
    assert_eq!(printed, csv_auc);
    let latent = std::fs::read_to_string(out.join("latent3d.csv")).unwrap();
    assert!(latent.starts_with("id,anomaly_flag,c1,c2,c3\n"));
}

#[test]
fn synth_writes_a_readable_idx_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("fixture");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    let d = lrad::datasets::read_idx(&out.join("images.idx"), &out.join("labels.idx")).unwrap();
    assert_eq!(d.len(), 120);
    assert_eq!(d.images.shape(), &[120, 1, 16, 16]);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = lrad(&["train", "--data", "mnist", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));
    let r = lrad(&["train", "--held-class", "12", "--data", "cifar10", "--dir", s(dir.path()), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&r.stderr).contains("held-class"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "train": { "epochz": 3 } }"#).unwrap();
    let r = lrad(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));

    let junk = dir.path().join("junk.lrad");
    std::fs::write(&junk, b"LRAD\x01").unwrap();
    let r = lrad(&["score", "--checkpoint", s(&junk), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(EXIT_DATA));
}
