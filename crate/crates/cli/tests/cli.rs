use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn stagewise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagewise")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = stagewise(&["run", config("fig1_example").to_str().unwrap(), "--out-dir", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "trace_trial.csv", "trace_stage.csv", "gantt_trial.svg", "gantt_stage.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 4);
    assert!(stdout(&o).contains("stage_based"));
}

#[test]
fn policy_and_seed_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = stagewise(&[
        "run",
        config("fig1_example").to_str().unwrap(),
        "--out-dir",
        out,
        "--policy",
        "stage",
        "--seed",
        "11",
    ]);
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("trace_trial.csv").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 11);
    assert!(report["trial_based"].is_null());
}

#[test]
fn compare_gantt_and_tree() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&stagewise(&["run", config("fig1_example").to_str().unwrap(), "--out-dir", a.to_str().unwrap()])), 0);
    assert_eq!(code(&stagewise(&["run", config("resnet_sha").to_str().unwrap(), "--out-dir", b.to_str().unwrap()])), 0);

    let o = stagewise(&[
        "compare",
        a.join("report.json").to_str().unwrap(),
        b.join("report.json").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("fig1_example") || l.starts_with("resnet_sha")).count(), 4);
    assert!(dir.path().join("compare.csv").exists());

    let svg_dir = dir.path().join("svg");
    let o = stagewise(&["gantt", a.join("trace_stage.csv").to_str().unwrap(), "--out-dir", svg_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let svg = std::fs::read_to_string(svg_dir.join("trace_stage.svg")).unwrap();
    assert_eq!(svg, std::fs::read_to_string(a.join("gantt_stage.svg")).unwrap());

    let o = stagewise(&["tree", config("resnet_grid").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("savings_ratio  3.4615"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&stagewise(&[])), 1);
    assert_eq!(code(&stagewise(&["compare"])), 1);
    assert_eq!(code(&stagewise(&["run", "x.json", "--policy", "neither"])), 1);
    assert_eq!(code(&stagewise(&["--help"])), 0);
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x"}"#).unwrap();
    let o = stagewise(&["run", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    assert_eq!(code(&stagewise(&["tree", "/nonexistent/config.json"])), 2);

    let trace = dir.path().join("t.csv");
    std::fs::write(&trace, "time_s,event\n1,launch\n").unwrap();
    let o = stagewise(&["gantt", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    let report = dir.path().join("r.json");
    std::fs::write(&report, "not json").unwrap();
    assert_eq!(code(&stagewise(&["compare", report.to_str().unwrap()])), 2);
}

#[test]
fn simulation_failures_exit_three() {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("fig1_example")).unwrap()).unwrap();
    // 2 GPUs of 12 GB cannot hold a stage that needs about 200 GB.
    v["study"]["trials"]["list"][0]["segments"][0]["hp"]["batch_size"] = serde_json::json!(100000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("huge.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = stagewise(&["run", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["stage_based"]["trial_outcomes"]["T1"], "failed");
    assert_eq!(report["stage_based"]["trial_outcomes"]["T2"], "finished");
}
