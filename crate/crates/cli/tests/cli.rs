//! Exit codes and diagnostics of the command-line driver.

use std::path::Path;
use std::process::{Command, Output};

fn kitseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kitseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"trainer": {"max_epochs": 2, "warmup": 5}}"#).unwrap();
    let out = kitseg(&["--config", path(&cfg), "phantom", "--out", path(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("trainer.warmup"), "{}", stderr(&out));
}

#[test]
fn every_violation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"trainer": {"batch_size": 0, "initial_lr": -1}, "inference": {"overlap": 1.5}}"#).unwrap();
    let out = kitseg(&["--config", path(&cfg), "phantom", "--out", path(&dir.path().join("d"))]);
    assert!(!out.status.success());
    let err = stderr(&out);
    for key in ["trainer.batch_size", "trainer.initial_lr", "inference.overlap"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

#[test]
fn unsupported_device_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = kitseg(&["--device", "cuda", "phantom", "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cuda"));
}

#[test]
fn evaluate_lists_missing_cases() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = kitseg(&["--toy", "--seed", "3", "phantom", "--out", path(&data), "--cases", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(data.join("resolved_config.json").is_file());
    // Predictions for two of the three cases: copy their ground truth.
    let pred = dir.path().join("pred");
    for id in ["case_00000", "case_00002"] {
        std::fs::create_dir_all(pred.join(id)).unwrap();
        std::fs::copy(data.join(id).join("segmentation.raw"), pred.join(id).join("prediction.raw")).unwrap();
        std::fs::copy(data.join(id).join("segmentation.json"), pred.join(id).join("prediction.json")).unwrap();
    }
    let report = dir.path().join("report");
    let out = kitseg(&["evaluate", "--pred", path(&pred), "--gt", path(&data), "--out", path(&report)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("case_00001"), "{}", stderr(&out));

    // With the full set, perfect predictions score 1.
    let id = "case_00001";
    std::fs::create_dir_all(pred.join(id)).unwrap();
    std::fs::copy(data.join(id).join("segmentation.raw"), pred.join(id).join("prediction.raw")).unwrap();
    std::fs::copy(data.join(id).join("segmentation.json"), pred.join(id).join("prediction.json")).unwrap();
    let out = kitseg(&["evaluate", "--pred", path(&pred), "--gt", path(&data), "--out", path(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1.0")), "{summary}");
    assert!(report.join("resolved_config.json").is_file());
}
