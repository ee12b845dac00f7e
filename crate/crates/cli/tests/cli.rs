//! End-to-end tests of the command-line surface: each workflow through
//! the real binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ugconv"))
}

fn write_idx_fixture(dir: &Path, n_train: usize, n_test: usize) {
    let train = ugconv::data::synthetic_dataset(n_train, 31);
    let test = ugconv::data::synthetic_dataset(n_test, 32);
    ugconv::data::write_idx(
        &train,
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    ugconv::data::write_idx(
        &test,
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
}

#[test]
fn verify_single_suite() {
    let out = bin().args(["verify", "--suite", "costmodel"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS costmodel"), "{stdout}");
    assert!(stdout.contains("all suites passed"), "{stdout}");
}

#[test]
fn verify_unknown_suite_fails_nonzero() {
    let out = bin().args(["verify", "--suite", "nonesuch"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ugconv: error:"), "{stderr}");
}

#[test]
fn count_builtin_arch() {
    let out = bin().args(["count", "--arch", "resnet18-g8"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1916096"), "{stdout}");
    assert!(stdout.contains("overhead"), "{stdout}");
}

#[test]
fn count_unknown_arch_is_single_line_error() {
    let out = bin().args(["count", "--arch", "resnet99"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("ugconv: error: count:"), "{stderr}");
}

#[test]
fn count_descriptor_with_malformed_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"name\": ").unwrap();
    let out = bin()
        .args(["count", "--descriptor", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.json"), "{stderr}");
}

#[test]
fn count_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv: PathBuf = dir.path().join("report.csv");
    let out = bin()
        .args(["count", "--arch", "shufflenet-x025-g8", "--out", csv.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("name,params,fpmuls,fpadds,transform_adds"), "{body}");
    assert!(body.contains("total,444480,"), "{body}");
}

#[test]
fn train_smoke_on_fixture_data() {
    let data = tempfile::tempdir().unwrap();
    write_idx_fixture(data.path(), 64, 32);
    let outdir = tempfile::tempdir().unwrap();

    // A tiny config file: one epoch on the fixture set.
    let mut cfg = ugconv::config::preset("table2-row1-none").unwrap();
    cfg.seeds = vec![1, 2];
    if let Some(t) = cfg.train.as_mut() {
        t.epochs = 1;
        t.batch_size = 16;
        t.train_subset = Some(64);
        t.eval_subset = Some(32);
    }
    let cfg_path = data.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();

    let out = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            outdir.path().to_str().unwrap(),
            "--data-dir",
            data.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(outdir.path().join("seed1.csv").exists());
    assert!(outdir.path().join("seed2.ugck").exists());
    let summary = std::fs::read_to_string(outdir.path().join("summary.csv")).unwrap();
    assert!(summary.contains("mean,"), "{summary}");

    // Per-seed CSV carries the documented header.
    let csv = std::fs::read_to_string(outdir.path().join("seed1.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,test_error,wall_seconds"), "{csv}");
}

#[test]
fn train_with_preset_and_seed_override() {
    let data = tempfile::tempdir().unwrap();
    write_idx_fixture(data.path(), 32, 16);
    let outdir = tempfile::tempdir().unwrap();
    // The preset's full protocol would be slow; trimming via config is the
    // supported path, so here just verify the preset parses and runs one
    // tiny seed by overriding the dataset subset through a config file.
    let mut cfg = ugconv::config::preset("table2-row4-hada-pq").unwrap();
    cfg.seeds = vec![7];
    if let Some(t) = cfg.train.as_mut() {
        t.epochs = 1;
        t.batch_size = 8;
        t.train_subset = Some(32);
        t.eval_subset = Some(16);
    }
    let cfg_path = data.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seeds",
            "9",
            "--out",
            outdir.path().to_str().unwrap(),
            "--data-dir",
            data.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Seed list overridden on the command line.
    assert!(outdir.path().join("seed9.csv").exists());
    assert!(!outdir.path().join("seed7.csv").exists());
}

#[test]
fn train_missing_data_reports_cleanly() {
    let outdir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train",
            "--preset",
            "table2-row1-none",
            "--out",
            outdir.path().to_str().unwrap(),
            "--data-dir",
            "/nonexistent-ugconv-data",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing dataset file"), "{stderr}");
}

#[test]
fn unknown_transform_in_config_rejected_before_training() {
    let data = tempfile::tempdir().unwrap();
    let cfg_path = data.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"schema_version":1,"workflow":"train","model":"mnist-toy-row1","transform":"sparkle","seeds":[1]}"#,
    )
    .unwrap();
    let outdir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            outdir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("ugconv: error: config:"), "{stderr}");
}
