use std::path::Path;
use std::process::{Command, Output};

use secat_core::pipeline::PipelineConfig;

fn secat(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secat"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env("SECAT_THREADS", "1")
        .output()
        .expect("spawn secat")
}

fn smoke_config(dir: &Path) -> String {
    let path = dir.join("smoke.json");
    std::fs::write(&path, PipelineConfig::smoke(3).to_json().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = secat(dir.path(), &["gen-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = secat(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = secat(&dir.path().join("ws"), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing checkpoint"), "{}", stderr(&out));
}

#[test]
fn bad_config_is_an_invariant_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "surprise": true}"#).unwrap();
    let out = secat(&dir.path().join("ws"), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let mut manifests = Vec::new();
    for name in ["a", "b"] {
        let ws = dir.path().join(name);
        let out = secat(&ws, &["gen-data", "--config", &cfg]);
        assert!(out.status.success(), "{}", stderr(&out));
        manifests.push(std::fs::read(ws.join("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    let ws = dir.path().join("c");
    assert!(secat(&ws, &["gen-data", "--config", &cfg, "--seed", "99"])
        .status
        .success());
    assert_ne!(std::fs::read(ws.join("manifest.json")).unwrap(), manifests[0]);
}

#[test]
fn full_chain_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let ws = dir.path().join("ws");
    let first = secat(&ws, &["gen-data", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    for cmd in ["cluster", "pretrain", "assign-names", "adapt", "eval"] {
        let out = secat(&ws, &[cmd]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let names = std::fs::read_to_string(ws.join("names/names.tsv")).unwrap();
    assert_eq!(names.lines().count(), 4);
    let report = secat(&ws, &["report"]);
    assert!(report.status.success());
    let table = String::from_utf8(report.stdout).unwrap();
    assert!(table.contains("2-way 1-shot"), "{table}");
    assert!(table.contains("secat") && table.contains("pretrained_only"), "{table}");
    assert!(!ws.join(".lock").exists());
}

#[test]
fn k_sweep_ablation_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let ws = dir.path().join("ws");
    let out = secat(&ws, &["ablate", "--kind", "k_sweep", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(ws.join("reports/ablation_k_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    let plot = secat(&ws, &["report", "--plot-data"]);
    assert!(plot.status.success());
    assert_eq!(String::from_utf8(plot.stdout).unwrap().lines().count(), 5);
    let bad = secat(&ws, &["ablate", "--kind", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn locked_workspace_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    std::fs::create_dir_all(&ws).unwrap();
    std::fs::write(ws.join(".lock"), b"").unwrap();
    let out = secat(&ws, &["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("locked"));
}
