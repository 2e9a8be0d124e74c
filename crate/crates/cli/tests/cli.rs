//! Exit codes, manifests and replay of the `tracegrad` binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracegrad"))
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    let tmp = tempfile::tempdir().unwrap();
    run(args, tmp.path()).status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["trace-bench", "--trials", "0"]), 2);
    assert_eq!(code(&["grad-check", "--r", "0"]), 2);
    assert_eq!(code(&["bound-check", "--trials", "10"]), 2);
    assert_eq!(code(&["bound-check", "--delta", "1.5"]), 2);
    assert_eq!(code(&["mem-report"]), 2);
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["trace-bench", "--no-such-flag"]), 2);
    assert_eq!(code(&["perf-bench", "--mode", "exact"]), 2);
}

#[test]
fn unreadable_spec_is_a_usage_error() {
    assert_eq!(code(&["mem-report", "--spec", "no/such/spec.json"]), 2);
}

#[test]
fn failed_check_exits_with_one() {
    // a tolerance no finite-difference check can meet
    assert_eq!(code(&["grad-check", "--mode", "exact", "--side", "4", "--fd-tol", "0"]), 1);
}

#[test]
fn run_writes_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["mem-report", "--spec", "presets/mnist_conv3.json", "--batch", "64", "--r", "16"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "mem-report");
    assert_eq!(manifest["outputs"][0], "mem_report.csv");
    let csv = std::fs::read_to_string(tmp.path().join("mem_report.csv")).unwrap();
    assert!(csv.starts_with("layer,kind,input,conventional,probed,factor\n"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("factor"));
}

#[test]
fn replay_needs_no_input_files_and_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::copy(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets/mnist_conv3.json"), &spec).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["mem-report", "--spec", spec.to_str().unwrap(), "--convention", "nnlib"], &a).status.success());
    std::fs::remove_file(&spec).unwrap();
    let replay = run(&["replay", a.join("manifest.json").to_str().unwrap(), "--threads", "1"], &b);
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(std::fs::read(a.join("mem_report.csv")).unwrap(), std::fs::read(b.join("mem_report.csv")).unwrap());
}

#[test]
fn replaying_a_replay_manifest_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m.json");
    std::fs::write(&m, r#"{"subcommand":"replay","version":"0","seed":0,"threads":1,"command":{"replay":{"manifest":"x"}},"outputs":[],"pass":true}"#).unwrap();
    assert_eq!(code(&["replay", m.to_str().unwrap()]), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["grad-check", "--side", "4", "--samples", "600", "--mode", "multi"];
    let ra = run(&[&args[..], &["--threads", "1"]].concat(), &a);
    let rb = run(&[&args[..], &["--threads", "3"]].concat(), &b);
    assert_eq!(ra.status.code(), rb.status.code());
    for f in ["grad_check.csv", "grad_check_summary.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
