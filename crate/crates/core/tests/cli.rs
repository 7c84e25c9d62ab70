mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::fixture;
use serde_json::Value;

fn sept(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sept")).args(args).env("SEPT_THREADS", "1").output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = sept(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_twice_gives_identical_files_and_replays_from_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture("tiny_k4.json");
    let nb = fixture("tiny_k4_neighbors.json");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "-m".into(),
            p(&manifest).into(),
            "--neighbors".into(),
            p(&nb).into(),
            "--n-neighbors".into(),
            "3".into(),
            "--templates-used".into(),
            "8".into(),
            "--context-len".into(),
            "4".into(),
            "--epochs".into(),
            "5".into(),
            "-o".into(),
            p(out).into(),
        ]
    };
    let first = ok_json(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    ok_json(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let meta = &first["metadata"];
    assert_eq!(meta["tool"], "sept");
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["config"]["epochs"], 5);
    assert!(meta["git_describe"].is_string());

    let stdout = dir.path().join("stdout.json");
    std::fs::write(&stdout, serde_json::to_string(&first).unwrap()).unwrap();
    let c = dir.path().join("c.json");
    ok_json(&[
        "train",
        "-m",
        p(&manifest),
        "--neighbors",
        p(&nb),
        "--config",
        p(&stdout),
        "-o",
        p(&c),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let report = ok_json(&["eval", "b2n", "-m", p(&manifest), "--trained", p(&a), p(&b)]);
    let r = &report["result"];
    assert_eq!(r["runs"].as_array().unwrap().len(), 2);
    assert!(r["h"].as_f64().unwrap() >= 0.0);
}

#[test]
fn usage_errors_exit_with_two() {
    let manifest = fixture("tiny_k4.json");
    assert_eq!(sept(&["eval", "b2n", "-m", p(&manifest)]).status.code(), Some(2));
    assert_eq!(sept(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sept(&["neighbors", "generate", "--classes", "dog"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_non_zero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x", "dim": 0, "classes": [], "folds": [], "samples": []}"#).unwrap();
    let out = sept(&["zero-shot", "-m", p(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/dim"));
}

#[test]
fn zero_shot_and_neighbor_stats_report_results() {
    let manifest = fixture("synthetic_k8.json");
    let zs = ok_json(&["zero-shot", "-m", p(&manifest)]);
    assert!(zs["result"].is_object());
    let stats = ok_json(&["neighbors", "stats", "-m", p(&manifest), "--neighbors", p(&fixture("synthetic_k8_neighbors.json"))]);
    assert!(stats["result"].is_object());
}

#[test]
fn synth_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let nb = dir.path().join("s_nb.json");
    ok_json(&[
        "synth",
        "--k",
        "4",
        "--d",
        "8",
        "--train-per-class",
        "4",
        "--test-per-class",
        "4",
        "--sidecar",
        "s.bin",
        "--neighbors-out",
        p(&nb),
        "-o",
        p(&out),
    ]);
    let m = sept::io::manifest::DatasetManifest::load(&out).unwrap();
    assert_eq!(m.samples.len(), 4 * 8);
    assert!(dir.path().join("s.bin").exists());
    assert!(nb.exists());
}
