use std::path::Path;
use std::process::{Command, Output};

use uniultra_cli::{exit_code, CheckFailed, DataError, UsageError};

fn uniultra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniultra")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = uniultra(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> serde_json::Value {
    serde_json::from_str(ok(args).lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["gen-data", "--out", s(&data), "--n", "6", "--val", "2", "--test", "1", "--seed", "3"]);
    s(&data).to_owned()
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(exit_code(&UsageError("x".into()).into()), 1);
    assert_eq!(exit_code(&DataError("x".into()).into()), 2);
    assert_eq!(exit_code(&CheckFailed("x".into()).into()), 3);
}

#[test]
fn bad_input_exits_with_usage_or_data_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uniultra(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(uniultra(&["train", "--edge-directions", "up"]).status.code(), Some(1));
    assert_eq!(uniultra(&["train"]).status.code(), Some(1));
    let missing = dir.path().join("nope");
    let out = uniultra(&["train", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"lrr": 1}}"#).unwrap();
    assert_eq!(uniultra(&["params", "--config", s(&cfg)]).status.code(), Some(1));
    assert_eq!(uniultra(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_data_writes_the_requested_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let pngs = std::fs::read_dir(Path::new(&data).join("images")).unwrap().count();
    assert_eq!(pngs, 6);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&data).join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.is_object() || manifest.is_array());
}

#[test]
fn train_eval_distill_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let teacher = dir.path().join("teacher");
    let report = json(&["train", "--data", &data, "--out", s(&teacher), "--epochs", "2"]);
    assert_eq!(report["epochs"], 2);
    assert!(report["frozen_tensors_checked"].as_u64().unwrap() > 0);
    let csv = std::fs::read_to_string(teacher.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,lr,train_loss,train_dice,val_dice");
    assert_eq!(csv.lines().count(), 3);

    let snapshot = |d: &Path| {
        let mut files: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.into_iter().map(|f| (f.clone(), std::fs::read(f).unwrap())).collect::<Vec<_>>()
    };
    let before = snapshot(&teacher);
    let per_image = dir.path().join("per_image.csv");
    let summary = json(&["eval", "--checkpoint", s(&teacher), "--data", &data, "--split", "val", "--csv", s(&per_image)]);
    assert_eq!(summary["images"], 2);
    assert_eq!(snapshot(&teacher), before);
    assert_eq!(std::fs::read_to_string(&per_image).unwrap().lines().count(), 3);
    assert_eq!(uniultra(&["eval", "--checkpoint", s(&teacher), "--data", &data, "--split", "dev"]).status.code(), Some(1));

    let student = dir.path().join("student");
    let report = json(&["distill", "--teacher", s(&teacher), "--data", &data, "--out", s(&student), "--epochs", "2", "--levels", "d1,d3"]);
    assert_eq!(report["levels"], serde_json::json!(["d1", "d3"]));
    assert!(report["loss_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(std::fs::read_to_string(student.join("trace.csv")).unwrap().lines().count(), 4);
    let summary = json(&["eval", "--checkpoint", s(&student), "--data", &data, "--split", "test"]);
    assert_eq!(summary["images"], 1);
    assert_eq!(uniultra(&["distill", "--teacher", s(&student), "--data", &data, "--out", s(&dir.path().join("x"))]).status.code(), Some(1));
}

#[test]
fn params_and_ablation_tables() {
    let table = json(&["params", "--json"]);
    let ratio = table["encoder_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0);
    assert!(ok(&["params", "--preset", "paper"]).lines().count() > 2);

    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out = dir.path().join("abl");
    ok(&["ablate", "--study", "adapter-dim", "--data", &data, "--out", s(&out), "--arms", "4,8", "--epochs", "1"]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "study,arm,trainable,train_dice,val_dice,dskd_ratio");
    assert_eq!(rows.len(), 3);
    assert_eq!(uniultra(&["ablate", "--study", "distill-levels", "--data", &data]).status.code(), Some(1));
}
