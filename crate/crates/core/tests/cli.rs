mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cohort-shapley"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cli")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn t8_config() -> String {
    common::fixture("t8.json").to_string_lossy().into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn local_cs_on_t8() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["local", "--config", &t8_config(), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&out.path().join("attributions.json"));
    let a = &doc["attributions"][0];
    assert_eq!(a["target"], 8);
    assert_eq!(a["phi"]["x1"], 1.0);
    assert_eq!(a["phi"]["x2"], 0.5);
    assert_eq!(a["phi"]["x3"], 0.0);
    let keys: Vec<&String> = a["phi"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["x1", "x2", "x3"]);
}

#[test]
fn local_all_targets_writes_panel() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "local",
        "--config",
        &t8_config(),
        "--targets",
        "all",
        "--method",
        "cs2",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let panel = fs::read_to_string(out.path().join("panel.csv")).unwrap();
    let lines: Vec<&str> = panel.lines().collect();
    assert_eq!(lines[0], "rank,subject,x1,x2,x3,overlay");
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[8], "8,8,1.5,0.75,0,1.5");
}

#[test]
fn global_on_t8() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["global", "--config", &t8_config(), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&out.path().join("global.json"));
    assert_eq!(doc["method"], "var");
    assert_eq!(doc["phi"]["x1"], 1.0);
    assert_eq!(doc["phi"]["x2"], 0.25);
    assert_eq!(doc["total"], 1.25);
    assert!(doc["disaggregation_residual"].as_f64().unwrap() <= 1e-9 * 1.25);
    assert!(String::from_utf8_lossy(&o.stdout).contains("disaggregation residual"));
}

#[test]
fn baseline_methods_with_external_model() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "local",
        "--config",
        &t8_config(),
        "--method",
        "abs2",
        "--model",
        "external:awk -F, {print(2*$1+$2)}",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&out.path().join("attributions.json"));
    assert_eq!(doc["attributions"][0]["total"], 3.5);
}

#[test]
fn cube_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cube.json", r#"{"cube": {"values": [0, 0, 0, 1]}}"#);
    let o = run(&["cube", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let doc = read_json(&dir.path().join("cube.json"));
    assert_eq!(doc["shapley_anchored"], serde_json::json!([0.5, 0.5]));
    assert!(doc["max_discrepancy"].as_f64().unwrap() <= 1e-12);
    assert_eq!(doc["anchored_components"]["{1,2}"], 1.0);

    let cfg = write_config(dir.path(), "bad.json", r#"{"cube": {"values": [0, 0, 1]}}"#);
    assert_eq!(run(&["cube", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(
        dir.path(),
        "dep.json",
        r#"{"cube": {"values": [0, 1, 1, 0], "weights": [0.5, 0, 0, 0.5]}}"#,
    );
    assert_eq!(run(&["cube", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn audit_on_full_factorial() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::fixture("t8.csv");
    let cfg = write_config(
        dir.path(),
        "audit.json",
        &format!(
            r#"{{
  "data": {data:?},
  "schema": {{"x1": "binary", "x2": "binary", "x3": "binary"}},
  "model": {{"kind": "linear", "coefficients": [2, 1, 0], "intercept": 0}},
  "baseline": [0, 0, 0],
  "audit": {{"thresholds": [0.1, 0.5], "holdout_fractions": [0.25], "runs": 3, "split_targets": [8]}}
}}"#
        ),
    );
    let o = run(&["audit", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("realism.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("threshold,source,fraction,rate"));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        match fields[1] {
            // every combination is observed
            "marginal" => assert_eq!(fields[3], "1"),
            // held-out corners have no duplicate in the training rows
            "holdout" => assert_eq!(fields[3], "0"),
            other => panic!("unexpected source {other}"),
        }
    }
    let splits = read_json(&dir.path().join("splits.json"));
    let s = &splits["splits"][0];
    assert_eq!(s["phi_unrealistic"]["x1"], 0.0);
    assert_eq!(s["phi_realistic"]["x1"], 2.0);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let o = run(&[
            "local",
            "--config",
            &t8_config(),
            "--targets",
            "all",
            "--engine",
            "mc",
            "--permutations",
            "300",
            "--seed",
            "11",
            "--threads",
            threads,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for f in ["attributions.json", "panel.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let t8 = t8_config();
    for args in [
        vec!["local", "--config", &t8, "--method", "nope"],
        vec!["local", "--config", &t8, "--targets", "9"],
        vec!["local", "--config", &t8, "--targets", "0"],
        vec!["local", "--config", &t8, "--method", "bs"],
        vec!["local", "--config", &t8, "--method", "var"],
        vec!["local", "--config", &t8, "--engine", "fast"],
        vec!["local", "--config", &t8, "--permutations", "10"],
        vec!["local", "--config", &t8, "--model", "internal:x"],
        vec!["local", "--config", "/nonexistent/config.json"],
        vec!["local", "--targets", "1"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let data = common::fixture("t8.csv");
    let cases = [
        r#""rules": {"x9": {"kind": "identity"}}"#,
        r#""rules": {"x1": {"kind": "abs", "delta": -1}}"#,
        r#""rules": {"x1": {"kind": "cosine"}}"#,
        r#""baseline": [1, 2]"#,
        r#""model": {"kind": "linear", "coefficients": [1], "intercept": 0}"#,
        r#""unknown_key": 1"#,
    ];
    for (k, extra) in cases.iter().enumerate() {
        let cfg = write_config(
            dir.path(),
            &format!("c{k}.json"),
            &format!(
                r#"{{"data": {data:?}, "schema": {{"x1": "binary", "x2": "binary", "x3": "binary"}},
                "prediction_column": "y", "targets": [1], {extra}}}"#
            ),
        );
        let o = run(&["local", "--config", &cfg]);
        assert_eq!(o.status.code(), Some(2), "{extra}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // a schema column missing from the file
    let cfg = write_config(
        dir.path(),
        "missing.json",
        &format!(r#"{{"data": {data:?}, "schema": {{"x1": "binary", "zz": "numeric"}}, "targets": [1]}}"#),
    );
    assert_eq!(run(&["local", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "local",
        "--config",
        &t8_config(),
        "--method",
        "bs",
        "--model",
        "external:false",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
