use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn robmetric(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robmetric"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let out = robmetric(&["init-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut cfg: toml::Value = toml::from_str(&text).unwrap();
    cfg["repetitions"] = toml::Value::Integer(2);
    cfg["mc_samples"] = toml::Value::Integer(2000);
    cfg["probe_size"] = toml::Value::Integer(50);
    cfg["synthetic"]["n"] = toml::Value::Integer(60);
    let p = dir.join("cfg.toml");
    fs::write(&p, toml::to_string(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(robmetric(&["--help"]).status.code(), Some(0));
    assert_eq!(robmetric(&[]).status.code(), Some(1));
    assert_eq!(robmetric(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(robmetric(&["bound", "--epsilon", "x"]).status.code(), Some(1));
}

#[test]
fn bound_prints_value_and_rejects_bad_input() {
    let out = robmetric(&["bound", "--epsilon", "0.1", "--b", "1", "--k", "4", "--n", "100", "--delta", "0.05"]);
    assert!(out.status.success());
    let v: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    let s = ((8.0 * 2f64.ln() + 2.0 * 20f64.ln()) / 100.0).sqrt();
    assert!((v - (0.1 + 2.0 * s)).abs() < 1e-12);

    let bad = robmetric(&["bound", "--epsilon", "0.1", "--b", "1", "--k", "4", "--n", "100", "--delta", "1.5"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}

#[test]
fn bhc_reports_json() {
    let out = robmetric(&["bhc", "--k", "3", "--n", "50", "--lambda", "0.3", "--trials", "2000"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["violation"], serde_json::Value::Bool(false));
}

#[test]
fn pipeline_gen_train_audit_knn() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    let model = dir.path().join("model.json");
    let report = dir.path().join("report.json");

    assert!(robmetric(&["gen", "--config", path(&cfg), "--out", path(&data)]).status.success());
    assert!(robmetric(&["gen", "--n", "80", "--seed", "9", "--out", path(&test)]).status.success());
    assert!(robmetric(&["train", "--data", path(&data), "--radius", "2", "--out", path(&model)]).status.success());
    let audit = robmetric(&[
        "audit", "--model", path(&model), "--data", path(&data), "--config", path(&cfg), "--out", path(&report),
    ]);
    assert!(audit.status.success(), "{}", String::from_utf8_lossy(&audit.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["bound_pair"].as_f64().unwrap().is_finite());

    let knn = robmetric(&["knn", "--model", path(&model), "--train", path(&data), "--test", path(&test), "--k", "3"]);
    assert!(knn.status.success());
    let acc: f64 = String::from_utf8(knn.stdout).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn run_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = robmetric(&["run", "--config", path(&cfg), "--sequential"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);

    let curve = robmetric(&["curve", "--config", path(&cfg), "--ladder", "20,40"]);
    assert!(curve.status.success());
    assert_eq!(String::from_utf8(curve.stdout).unwrap().lines().count(), 3);
}

#[test]
fn runtime_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(robmetric(&["run", "--config", path(&missing)]).status.code(), Some(1));

    let cfg = small_config(dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("schema_version = 1", "schema_version = 7");
    fs::write(&cfg, text).unwrap();
    assert_eq!(robmetric(&["run", "--config", path(&cfg)]).status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y\n1,a\n").unwrap();
    let model = dir.path().join("m.json");
    assert_eq!(robmetric(&["train", "--data", path(&bad), "--out", path(&model)]).status.code(), Some(1));

    // A tiny gamma overflows the covering bound: exit code 2.
    let huge = dir.path().join("huge.toml");
    let mut v: toml::Value = toml::from_str(&fs::read_to_string(small_config(dir.path())).unwrap()).unwrap();
    v["cover"]["gamma"] = toml::Value::Float(1e-6);
    fs::write(&huge, toml::to_string(&v).unwrap()).unwrap();
    assert_eq!(robmetric(&["run", "--config", path(&huge)]).status.code(), Some(2));
}
