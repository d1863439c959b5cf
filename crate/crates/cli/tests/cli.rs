use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diode(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diode")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_PROTOCOL: &str = r#"{"step_sizes": [4, 2, 2], "train_per_step": 12, "test_size": 6, "seed": 3}"#;

fn tiny_experiment(dir: &Path, method: &str) -> String {
    format!(
        r#"{{
  "protocol": {TINY_PROTOCOL},
  "method": "{method}",
  "iterations": 4,
  "batch_size": 2,
  "importance_samples": 4,
  "lambda_grid": [0.0, 1.0, 1e30],
  "probe_fraction": 0.5,
  "seeds": [0],
  "output_dir": "{}"
}}"#,
        dir.join("runs").display()
    )
}

#[test]
fn param_table_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("desk.json"), r#"{"step_sizes": [4, 2, 2]}"#).unwrap();
    let out = diode(&["param-table", "desk.json", "--out", "t"], dir.path());
    ok(&out);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(dir.path().join("t/param_table.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["added"], 0);
    let csv = fs::read_to_string(dir.path().join("t/param_table.csv")).unwrap();
    assert!(csv.starts_with("step,classes,added,cumulative,cumulative_ratio"));

    fs::write(dir.path().join("large.json"), r#"{"step_sizes": [15, 5], "channels": 256, "levels": 5}"#).unwrap();
    let out = diode(&["param-table", "large.json"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn gen_data_honours_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), TINY_PROTOCOL).unwrap();
    ok(&diode(&["gen-data", "p.json", "--out", "a"], dir.path()));
    ok(&diode(&["gen-data", "p.json", "--out", "b", "--seed", "3"], dir.path()));
    ok(&diode(&["gen-data", "p.json", "--out", "c", "--seed", "4"], dir.path()));
    let ann = |d: &str| fs::read_to_string(dir.path().join(d).join("train-step-0/annotations.json")).unwrap();
    assert_eq!(ann("a"), ann("b"));
    assert_ne!(ann("a"), ann("c"));
    let splits = fs::read_to_string(dir.path().join("a/splits.csv")).unwrap();
    assert_eq!(splits.lines().count(), 5);
}

#[test]
fn run_search_and_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("e.json"), tiny_experiment(dir.path(), "diode")).unwrap();
    ok(&diode(&["run", "e.json", "--search-lambda"], dir.path()));
    ok(&diode(&["run", "e.json", "--method", "finetune", "--seed", "1"], dir.path()));
    let runs = dir.path().join("runs");
    let lambda: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("lambda.json")).unwrap()).unwrap();
    assert_eq!(lambda["lambda"], 1.0);
    let diode_run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(runs.join("run-diode-seed0.json")).unwrap()).unwrap();
    assert_eq!(diode_run["lambda"], 1.0);
    assert_eq!(diode_run["steps"].as_array().unwrap().len(), 3);
    assert!(runs.join("run-finetune-seed1.csv").exists());

    ok(&diode(&["report", "runs"], dir.path()));
    for f in ["report.json", "map50.csv", "map_range.csv", "forgetting.csv", "summary.csv", "growth.csv", "ap.csv"] {
        assert!(runs.join("report").join(f).exists(), "{f}");
    }
    let map50 = fs::read_to_string(runs.join("report/map50.csv")).unwrap();
    assert_eq!(map50.lines().next().unwrap(), "method,step0,step1,step2");
    assert_eq!(map50.lines().count(), 3);
}

#[test]
fn lambda_search_reports_probe_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("e.json"), tiny_experiment(dir.path(), "constrained-ewc")).unwrap();
    ok(&diode(&["lambda-search", "e.json", "--out", "ls"], dir.path()));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ls/lambda.json")).unwrap()).unwrap();
    assert_eq!(v["search"]["lambda"], 1.0);
    assert_eq!(v["doubled_probe_lambda"], 1.0);
    assert!(v["doubled_probe_iterations"].as_u64() >= v["probe_iterations"].as_u64());
    let csv = fs::read_to_string(dir.path().join("ls/lambda.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.json"), r#"{"methd": "ewc"}"#).unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"lr": -1.0}"#).unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    for args in [
        vec!["run", "missing.json"],
        vec!["run", "typo.json"],
        vec!["run", "bad.json"],
        vec!["run", "bad.json", "--method", "nope"],
        vec!["report", "empty"],
        vec!["frobnicate"],
    ] {
        let out = diode(&args, dir.path());
        assert!(!out.status.success(), "{args:?} should fail");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("desk-") {
            let cfg: diode_core::runner::ExperimentConfig = serde_json::from_str(&text).unwrap();
            cfg.validate().unwrap();
        } else if name.starts_with("data-") {
            let spec: diode_core::scenario::ProtocolSpec = serde_json::from_str(&text).unwrap();
            spec.validate().unwrap();
        } else {
            let tmp = tempfile::tempdir().unwrap();
            ok(&diode(&["param-table", path.to_str().unwrap(), "--out", "t"], tmp.path()));
        }
        n += 1;
    }
    assert_eq!(n, 6);
}
