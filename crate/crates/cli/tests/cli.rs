use std::fs;
use std::path::Path;
use std::process::Command;

const SPECS: &str = r#"[
  {"task_id": "s0", "family_id": 0, "generator": {"kind": "sbm", "p_in": 0.2, "p_out": 0.02, "feature_signal": 0.5},
   "n_graphs": 1, "n_nodes": 40, "feature_dim": 3, "noise": 0.0, "seed": 1},
  {"task_id": "s1", "family_id": 0, "generator": {"kind": "sbm", "p_in": 0.15, "p_out": 0.03, "feature_signal": 0.3},
   "n_graphs": 1, "n_nodes": 44, "feature_dim": 3, "noise": 0.05, "seed": 2},
  {"task_id": "m0", "family_id": 1, "generator": {"kind": "motif-count", "edge_prob": 0.4, "color_prob": 0.5},
   "n_graphs": 20, "n_nodes": 6, "feature_dim": 3, "noise": 0.0, "seed": 3},
  {"task_id": "m1", "family_id": 1, "generator": {"kind": "motif-count", "edge_prob": 0.5, "color_prob": 0.4},
   "n_graphs": 24, "n_nodes": 6, "feature_dim": 3, "noise": 0.05, "seed": 4}
]"#;

const SETTINGS: &str = r#"
seed = 3
jobs = 1

[suite]
trials_per_task = 4

[suite.oracle]
epochs = 20
repeats = 1

[suite.feature]
repeats = 1
last_layer_steps = 5

[projection]
iterations = 50

[transfer]
k_top = 2
d_thres = 1.0

[curves]
n_seeds = 2
long_trials = 4
tpe_warmup = 2
"#;

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_autotransfer"))
        .current_dir(dir)
        .arg("--config")
        .arg("settings.toml")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("specs.json"), SPECS).unwrap();
    fs::write(dir.join("settings.toml"), SETTINGS).unwrap();

    run(dir, &["bank", "build", "--specs", "specs.json", "--out", "b"]);
    let bank = fs::read_to_string(dir.join("b/bank.jsonl")).unwrap();
    assert_eq!(bank.lines().count(), 16);
    assert!(dir.join("b/datasets/m1.splits.json").exists());

    let stats = run(dir, &["bank", "stats", "--bank", "b/bank.jsonl", "--out", "b"]);
    assert_eq!(stats.lines().count(), 4);
    assert_eq!(json(&dir.join("b/bank_stats.json"))[0]["trials"], 4);

    run(dir, &["oracle", "distances", "--bank", "b/bank.jsonl", "--out", "o"]);
    let csv = fs::read_to_string(dir.join("o/distances.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "task,s0,s1,m0,m1");

    run(dir, &["embed", "compute", "--bank", "b/bank.jsonl", "--out", "e"]);
    let features = fs::read_to_string(dir.join("e/features.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(features.lines().next().unwrap()).unwrap();
    assert_eq!(first["task_id"], "s0");
    assert_eq!(first["z_f"].as_array().unwrap().len(), 12);
    assert_eq!(first["per_anchor_alpha"].as_array().unwrap().len(), 12);

    run(
        dir,
        &["embed", "train-projection", "--features", "e/features.jsonl", "--oracle", "o/distances.csv", "--out", "e"],
    );
    let net = json(&dir.join("e/projection.json"));
    assert_eq!(net["layers"][0]["shape"], serde_json::json!([12, 16]));

    run(dir, &["bank", "process", "--bank", "b/bank.jsonl", "--net", "e/projection.json", "--out", "p"]);
    assert_eq!(fs::read_to_string(dir.join("p/processed.jsonl")).unwrap().lines().count(), 4);

    let common = ["search", "run", "--bank", "b/bank.jsonl", "--dataset", "b/datasets/s1.jsonl", "--task-id", "s1"];
    let mut transfer = common.to_vec();
    transfer.extend(["--processed", "p/processed.jsonl", "--net", "e/projection.json"]);
    transfer.extend(["--algo", "tpe", "--trials", "4", "--warmup", "2", "--out", "r/transfer.json"]);
    run(dir, &transfer);
    let result = json(&dir.join("r/transfer.json"));
    assert_eq!(result["result"]["trials"].as_array().unwrap().len(), 4);
    assert!(result["subset"].as_array().unwrap().iter().all(|s| s[0] != "s1"));

    let mut uniform = common.to_vec();
    uniform.extend(["--prior", "uniform", "--trials", "3", "--out", "r/uniform.json"]);
    run(dir, &uniform);
    assert!(json(&dir.join("r/uniform.json"))["subset"].as_array().unwrap().is_empty());

    run(
        dir,
        &["bank", "ingest", "--bank", "b/bank.jsonl", "--dataset", "b/datasets/s0.jsonl", "--task-id", "extra", "--trials", "2"],
    );
    assert_eq!(fs::read_to_string(dir.join("b/bank.jsonl")).unwrap().lines().count(), 18);
}

#[test]
fn experiments_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("specs.json"), SPECS).unwrap();
    fs::write(dir.join("settings.toml"), SETTINGS).unwrap();

    let loo = run(dir, &["eval", "loo", "--specs", "specs.json", "--out", "x"]);
    assert_eq!(loo.lines().count(), 3);
    assert_eq!(json(&dir.join("x/loo.json"))["rows"].as_array().unwrap().len(), 4);

    run(dir, &["eval", "curves", "--specs", "specs.json", "--out", "x"]);
    let csv = fs::read_to_string(dir.join("x/curves.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,trial,mean,std");
    assert!(fs::read_to_string(dir.join("x/curves.svg")).unwrap().starts_with("<svg"));
    assert_eq!(json(&dir.join("x/efficiency.json"))["runs"].as_array().unwrap().len(), 4 * 2 * 3);
}

#[test]
fn rejects_unknown_settings() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("settings.toml"), "bogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_autotransfer"))
        .current_dir(tmp.path())
        .args(["--config", "settings.toml", "bank", "stats", "--bank", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
