use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neurovis::eeg::EegEpochSet;
use neurovis::image::{encode_pnm, load_image_file, Image};
use neurovis::tensor::{write_tensor, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_neurovis");

const SMALL_MODEL: &str = r#"{
  "epochs": 2, "lr": 0.003, "batch_size": 16,
  "model": {"temporal_filters": 4, "temporal_kernel": 5, "spatial_filters": 8, "encoder_dim": 16, "embed_dim": 16}
}"#;

const SMALL_SYNTH: &str = r#"{"n_train": 48, "n_test": 12}"#;

fn neurovis(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("NEUROVIS_THREADS")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = neurovis(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(neurovis(dir.path(), &["eval", "--help"]).status.code(), Some(0));
    assert_eq!(neurovis(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(neurovis(dir.path(), &["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(neurovis(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(neurovis(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(neurovis(dir.path(), &["--threads", "0", "synth-gen", "--out", "x"]).status.code(), Some(1));
    let bad_band = ["filter-freq", "--in", ".", "--out", "o", "--band", "mid"];
    assert_eq!(neurovis(dir.path(), &bad_band).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = neurovis(dir.path(), &["train", "--manifest", "missing.json", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), r#"{"n_train": 10, "typo_field": 1}"#).unwrap();
    let out = neurovis(dir.path(), &["synth-gen", "--config", "bad.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_field"));
}

#[test]
fn synth_train_eval_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-gen", "--out", "ds"]);
    ok(d, &["train", "--manifest", "ds/manifest.json", "--out", "run", "--epochs", "1"]);
    ok(d, &["eval", "--manifest", "ds/manifest.json", "--checkpoint", "run", "--out", "ev"]);
    let rows = csv_rows(&d.join("ev/eval.csv"));
    assert_eq!(rows[0], ["subject", "top1", "top5"]);
    assert_eq!(rows.len(), 2);
    let top1: f64 = rows[1][1].parse().unwrap();
    let top5: f64 = rows[1][2].parse().unwrap();
    assert!((0.0..=1.0).contains(&top1) && top1 <= top5);
    for f in ["run/run.json", "run/timing.json", "ev/run.json", "ds/run.json", "run/loss.csv"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let loss = csv_rows(&d.join("run/loss.csv"));
    assert_eq!(loss[0], ["step", "loss", "tau"]);
    // 200 train concepts at the default batch of 64
    assert_eq!(loss.len(), 1 + 3);
    ok(d, &["eval", "--manifest", "ds/manifest.json", "--checkpoint", "run", "--out", "ev2", "--test-repetitions", "2"]);
    let too_many = ["eval", "--manifest", "ds/manifest.json", "--checkpoint", "run", "--out", "ev3", "--test-repetitions", "9"];
    assert_eq!(neurovis(d, &too_many).status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("synth.json"), SMALL_SYNTH).unwrap();
    fs::write(d.join("train.json"), SMALL_MODEL).unwrap();
    ok(d, &["synth-gen", "--config", "synth.json", "--out", "ds"]);
    ok(d, &["train", "--manifest", "ds/manifest.json", "--config", "train.json", "--epochs", "3", "--layers", "2,3", "--out", "run"]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 3);
    assert_eq!(cfg["lr"], 0.003);
    assert_eq!(cfg["layer_indices"], serde_json::json!([2, 3]));
    let epochs = fs::read_dir(d.join("run/checkpoints")).unwrap().count();
    assert_eq!(epochs, 3);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 0);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn sweeps_write_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("synth.json"), SMALL_SYNTH).unwrap();
    fs::write(d.join("train.json"), SMALL_MODEL).unwrap();
    ok(d, &["synth-gen", "--config", "synth.json", "--out", "ds"]);
    ok(d, &["sweep-pairs", "--manifest", "ds/manifest.json", "--config", "train.json", "--layers", "2,4", "--out", "pairs"]);
    let rows = csv_rows(&d.join("pairs/pairs.csv"));
    assert_eq!(rows[0], ["layer_a", "layer_b", "top1", "top5"]);
    let keys: Vec<(&str, &str)> = rows[1..].iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(keys, [("2", "2"), ("2", "4"), ("4", "4")]);
    ok(d, &["sweep-layers", "--manifest", "ds/manifest.json", "--config", "train.json", "--layers", "3", "--out", "layers"]);
    let rows = csv_rows(&d.join("layers/layers.csv"));
    assert_eq!(rows[0], ["layer", "pooling", "top1", "top5"]);
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[1][1].as_str(), rows[2][1].as_str()), ("mean", "max"));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(BIN)
        .args(["synth-gen", "--out", "ds"])
        .current_dir(d)
        .env("NEUROVIS_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ds/run.json")).unwrap()).unwrap();
    assert_eq!(meta["threads"], 2);
}

#[test]
fn preprocess_raw_recording() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (channels, len) = (3usize, 5000usize);
    let raw: Vec<f64> = (0..channels * len).map(|i| ((i * 7919) % 113) as f64 / 113.0).collect();
    write_tensor(&Tensor::from_f64(vec![channels, len], raw).unwrap(), d.join("raw.nvat")).unwrap();
    let events: Vec<serde_json::Value> = (0..8)
        .map(|i| serde_json::json!({"onset": 400 + 500 * i, "concept": format!("k{}", i % 2)}))
        .collect();
    let list = serde_json::json!({"sampling_rate_hz": 1000.0, "events": events});
    fs::write(d.join("events.json"), list.to_string()).unwrap();
    ok(
        d,
        &[
            "preprocess", "--raw", "raw.nvat", "--events", "events.json", "--out", "out/sub-01",
            "--pre-ms", "200", "--post-ms", "400", "--decimate", "4", "--mvnn-shrinkage", "0.1", "--avg-group", "2",
        ],
    );
    let (e, side) = EegEpochSet::load(&d.join("out/sub-01")).unwrap();
    assert_eq!(e.dims(), [2, 2, 3, 100]);
    assert_eq!(side.sampling_rate_hz, 250.0);
    assert_eq!(side.concepts, ["k0", "k1"]);
    assert!(d.join("out/sub-01.run.json").is_file());

    let bad = neurovis(d, &["preprocess", "--raw", "raw.nvat", "--events", "events.json", "--out", "o2", "--post-ms", "399", "--decimate", "4"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn filter_freq_bands_sum_to_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("imgs")).unwrap();
    let px: Vec<f64> = (0..3 * 8 * 10).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let color = Image::new(3, 8, 10, px).unwrap();
    fs::write(d.join("imgs/a.v1.ppm"), encode_pnm(&color)).unwrap();
    let gray = Image::new(1, 6, 6, (0..36).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
    write_tensor(&gray.to_tensor().unwrap(), d.join("imgs/b.nvat")).unwrap();
    fs::write(d.join("imgs/notes.txt"), "skip me").unwrap();
    ok(d, &["filter-freq", "--in", "imgs", "--out", "low", "--band", "low"]);
    ok(d, &["filter-freq", "--in", "imgs", "--out", "high", "--band", "high", "--cutoff", "0.2"]);
    for (name, src) in [("a.v1", &color), ("b", &gray)] {
        let lo = load_image_file(d.join(format!("low/{name}.nvat"))).unwrap();
        let hi = load_image_file(d.join(format!("high/{name}.nvat"))).unwrap();
        let original = load_image_file(d.join(format!("imgs/{name}.{}", if name == "a.v1" { "ppm" } else { "nvat" }))).unwrap();
        assert_eq!(&original.pixels.len(), &src.pixels.len());
        for i in 0..original.pixels.len() {
            assert!((lo.pixels[i] + hi.pixels[i] - original.pixels[i]).abs() < 1e-9);
        }
    }
    fs::write(d.join("imgs/b.pgm"), encode_pnm(&gray)).unwrap();
    let clash = neurovis(d, &["filter-freq", "--in", "imgs", "--out", "clash", "--band", "low"]);
    assert_eq!(clash.status.code(), Some(2));
    let empty = tempfile::tempdir().unwrap();
    let out = neurovis(d, &["filter-freq", "--in", empty.path().to_str().unwrap(), "--out", "x", "--band", "low"]);
    assert_eq!(out.status.code(), Some(2));
}
