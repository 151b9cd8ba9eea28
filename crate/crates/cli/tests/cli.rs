use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn minimal() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/minimal.json")
}

fn rlsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlsim")).args(args).output().expect("binary runs")
}

fn write_variant(dir: &Path, f: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(minimal()).unwrap()).unwrap();
    f(&mut v);
    let p = dir.join("scenario.json");
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn missing_scenario_exits_2() {
    let out = rlsim(&["run", "--scenario", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flag_exits_2() {
    let out = rlsim(&["run", "--scenari", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn minimal_run_records_each_step() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = rlsim(&["run", "--scenario", minimal().to_str().unwrap(), "--seed", "4", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = out_dir.join("verl-to/fat-tree/4");
    let summary: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_steps"], Value::from(3));
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_variant(dir.path(), |v| {
        v["fabric"]["pods"] = serde_json::json!([{ "role": "train", "servers": 1 }, { "role": "gen", "servers": 1 }]);
        v["baselines"] = serde_json::json!(["verl-to/rfabric", "orchestrrl/fat-tree"]);
        v["costs"]["weight_reshard_time"] = serde_json::json!({ "none->tp1": 1.0, "tp1->none": 0.0 });
        v["workload"]["n_requests"] = 40.into();
    });
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = rlsim(&["run", "--scenario", scn.to_str().unwrap(), "--seed", "9", "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for pair in ["verl-to/rfabric", "orchestrrl/fat-tree"] {
        for f in ["metrics.csv", "summary.json", "decisions.jsonl", "fabric.jsonl", "remaining.csv", "topo.json"] {
            let x = fs::read(a.join(pair).join("9").join(f)).unwrap();
            let y = fs::read(b.join(pair).join("9").join(f)).unwrap();
            assert_eq!(x, y, "{pair}/{f}");
        }
    }
}

#[test]
fn compare_self_ratio_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_variant(dir.path(), |v| v["baselines"] = serde_json::json!(["verl-to/fat-tree", "verl-to/fat-tree"]));
    let out_dir = dir.path().join("out");
    let out = rlsim(&["compare", "--scenario", scn.to_str().unwrap(), "--seeds", "2", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "normalized").unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(col).unwrap(), "1");
    }
}

#[test]
fn unknown_baseline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_variant(dir.path(), |v| v["baselines"] = serde_json::json!(["verl-to/fat-tree", "magic/fat-tree"]));
    let out = rlsim(&["compare", "--scenario", scn.to_str().unwrap(), "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn sweep_rows_and_bad_key() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let s = minimal();
    let args = ["sweep", "--scenario", s.to_str().unwrap(), "--grid", "modes.0.max_batch=8,16,32", "--out", out_dir.to_str().unwrap()];
    let out = rlsim(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(out_dir.join("sweep.csv")).unwrap().lines().count(), 4);
    let out = rlsim(&["sweep", "--scenario", s.to_str().unwrap(), "--grid", "modes.0.warp=1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_error_is_line_anchored() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write_variant(dir.path(), |v| v["gen"] = serde_json::json!({ "latency_mode": "tp64" }));
    let src = fs::read_to_string(&scn).unwrap();
    let line = src.lines().position(|l| l.contains("latency_mode")).unwrap() + 1;
    let out = rlsim(&["run", "--scenario", scn.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("scenario.json:{line}:")), "{err}");
}

#[test]
fn dumps_print_to_stdout() {
    let s = minimal();
    let out = rlsim(&["profile-dump", "--scenario", s.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(",tp1,"));
    let out = rlsim(&["topo-dump", "--scenario", s.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["epochs"].is_array());
}
