use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_respir-hht"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const QUICK_TRAIN: [&str; 6] = ["--arch", "12,8", "--epochs", "3", "--pretrain-epochs", "1"];

fn small_dataset(dir: &Path) {
    ok(&run(
        &["--seed", "5", "synth", "--n-per-class", "2", "--duration", "4", "--out", "data"],
        dir,
    ));
}

#[test]
fn missing_manifest_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["cv", "--manifest", "absent/manifest.json", "--out", "r/report.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent/manifest.json"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--features", "x.csv"], dir.path()).status.code(), Some(2));
    let out = run(&["train", "--features", "x.csv", "--arch", "0,4", "--out", "m.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"no_such_field": true}"#).unwrap();
    let out = run(&["--config", "c.json", "report", "--in", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.json"));
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    assert!(d.join("data/manifest.json").exists());
    assert!(d.join("data/A01_L1.wav").exists());
    assert!(d.join("data/H02_R6.wav").exists());

    ok(&run(&["decompose", "--in", "data/A01_L1.wav", "--out", "dec"], d));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("dec/decomposition.json")).unwrap()).unwrap();
    let n = summary["imf_count"].as_u64().unwrap();
    assert!(n >= 2);
    assert!(d.join("dec/imf_1.csv").exists() && d.join("dec/residual.csv").exists());

    ok(&run(&["hsa", "--in", "dec", "--rate", "4000", "--out", "hsa.json"], d));
    let hsa: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("hsa.json")).unwrap()).unwrap();
    assert_eq!(hsa["imfs"].as_array().unwrap().len() as u64, n);

    ok(&run(&["features", "--manifest", "data/manifest.json", "--out", "f.csv"], d));
    let csv = std::fs::read_to_string(d.join("f.csv")).unwrap();
    assert!(csv.starts_with("subject,channel,imf,label,mean,median,std,max,min,var,mode,corr,kurt,m3,c4,energy"));

    let mut args = vec!["--seed", "9", "train", "--features", "f.csv", "--out", "model.json"];
    args.extend(QUICK_TRAIN);
    ok(&run(&args, d));
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["version"], 1);
    assert_eq!(model["sizes"], serde_json::json!([12, 12, 8, 2]));
}

#[test]
fn cv_is_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let mut reports = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(d.join("run"));
        let mut args = vec!["--seed", "3", "cv", "--manifest", "data/manifest.json", "--k", "2", "--out", "run/report.json"];
        args.extend(QUICK_TRAIN);
        ok(&run(&args, d));
        reports.push(std::fs::read(d.join("run/report.json")).unwrap());
        assert!(d.join("run/features.csv").exists());
        assert!(d.join("run/models/fold_1.json").exists());
        assert!(d.join("run/models/fold_2.json").exists());
        assert!(!d.join("run/PARTIAL").exists());
    }
    assert_eq!(reports[0], reports[1]);

    let parsed: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(parsed["folds"].as_array().unwrap().len(), 2);
    assert_eq!(parsed["config"]["arch"], serde_json::json!([12, 8]));
    let cm = &parsed["pooled"]["cm"];
    let total: u64 = ["tp", "fn", "fp", "tn"].iter().map(|k| cm[k].as_u64().unwrap()).sum();
    let csv = std::fs::read_to_string(d.join("run/features.csv")).unwrap();
    assert_eq!(total as usize, csv.lines().count() - 1);

    let out = run(&["report", "--in", "run/report.json"], d);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("12-8 pooled"), "{text}");
    assert!(text.contains("Sensitivity"));
}

#[test]
fn config_file_supplies_settings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    std::fs::write(
        d.join("run.json"),
        r#"{"manifest": "data/manifest.json", "workdir": "cfg-out", "k": 2, "arch": [10, 6],
            "train": {"fine_tune_epochs": 2, "pretrain_epochs": 1}}"#,
    )
    .unwrap();
    ok(&run(&["--config", "run.json", "cv"], d));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cfg-out/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["arch"], serde_json::json!([10, 6]));
    assert_eq!(report["config"]["train"]["fine_tune_epochs"], 2);
    assert!(d.join("cfg-out/report.txt").exists());
}
