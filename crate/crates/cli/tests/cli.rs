use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sparsepca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsepca"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const RISK_CONFIG: &str = r#"{
    "kind": "risk_curve",
    "model": {"N": 20, "lambdas": [3.0]},
    "grid": {"N": [20, 40], "n": [100]},
    "estimators": ["pca", "dt", "aspca"],
    "replicates": 6,
    "master_seed": 5
}"#;

#[test]
fn results_do_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), RISK_CONFIG);
    let one = sparsepca(&["simulate", "--config", &config, "--jobs", "1"]);
    let four = sparsepca(&["simulate", "--config", &config, "--jobs", "4"]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    assert!(!one.stdout.is_empty());
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn output_directory_gets_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), RISK_CONFIG);
    let out = dir.path().join("run");
    let status = sparsepca(&["simulate", "--config", &config, "--output", out.to_str().unwrap()]);
    assert!(status.status.success());
    for file in ["results.csv", "replicates.csv", "manifest.json"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rows"], 6);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"kind": "risk_curve", "master_seed": 1, "replicatez": 3}"#);
    let out = sparsepca(&["simulate", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicatez"));

    let out = sparsepca(&["simulate", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn packing_prints_fano_summary() {
    let out = sparsepca(&["packing", "--m", "12", "--q", "1", "--C", "3", "--n", "10000", "--lambda", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["family_size", "r2", "kl_per_member", "fano_a", "lower_bound"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report["family_size"].as_u64().unwrap() >= 2);
}

#[test]
fn bounds_reports_regime() {
    let args = ["bounds", "--N", "10000", "--n", "1000", "--q", "1", "--C", "2", "--lambda", "1"];
    let out = sparsepca(&args);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["regime"], "sparse");

    let out = sparsepca(&[&args[..], &["--format", "text"]].concat());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("regime"));
    assert!(text.contains("delta_n"));
}

#[test]
fn invalid_parameters_fail_cleanly() {
    let out = sparsepca(&["bounds", "--N", "10", "--n", "100", "--q", "2.5", "--C", "2", "--lambda", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
