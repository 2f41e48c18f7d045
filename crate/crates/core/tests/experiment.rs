mod common;

use stagewise::experiment::{
    parse_config, run_experiment, write_artifacts, ConfigError, PolicySelection,
};
use stagewise::gantt::render_gantt;
use stagewise::report::{compare_rows, format_csv, format_table, parse_report};
use stagewise::sim::{parse_trace_csv, trace_to_csv_string, Policy};

use common::{bundled, config_path, BUNDLED};

fn fig1_text() -> String {
    std::fs::read_to_string(config_path("fig1_example")).unwrap()
}

fn field_of(err: ConfigError) -> String {
    match err {
        ConfigError::Parse { path, .. } => path,
        ConfigError::Invalid { field, .. } => field,
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn config_errors_name_the_field() {
    let base: serde_json::Value = serde_json::from_str(&fig1_text()).unwrap();
    let cases: [(&str, serde_json::Value, &str); 5] = [
        ("/cluster/gpus_per_node", serde_json::json!(0), "cluster"),
        ("/cost/epoch_time_s", serde_json::json!(-1.0), "cost"),
        ("/study/horizon_epochs", serde_json::json!("ten"), "study.horizon_epochs"),
        ("/algorithm/kind", serde_json::json!("bayes"), "algorithm"),
        ("/study/trials/list/0/segments/0/hp/lr", serde_json::json!("fast"), "study.trials"),
    ];
    for (ptr, value, want) in cases {
        let mut v = base.clone();
        *v.pointer_mut(ptr).unwrap() = value;
        let field = field_of(parse_config(&v.to_string()).unwrap_err());
        assert!(field.starts_with(want), "{ptr}: got {field}");
    }
    let mut v = base.clone();
    v["colour"] = serde_json::json!(1);
    assert!(parse_config(&v.to_string()).is_err());
}

#[test]
fn single_trial_ratios_are_one() {
    let mut v: serde_json::Value = serde_json::from_str(&fig1_text()).unwrap();
    let list = v.pointer_mut("/study/trials/list").unwrap().as_array_mut().unwrap();
    list.truncate(1);
    let cfg = parse_config(&v.to_string()).unwrap();
    let out = run_experiment(&cfg, PolicySelection::Both).unwrap();
    let r = out.report.ratios.unwrap();
    assert_eq!(r.epochs, Some(1.0));
    assert_eq!(r.gpu_hours, Some(1.0));
    assert_eq!(r.end_to_end, Some(1.0));
    assert_eq!(out.report.tree.savings_ratio(), 1.0);
}

#[test]
fn runs_are_byte_identical() {
    for name in BUNDLED {
        let cfg = bundled(name);
        let a = run_experiment(&cfg, PolicySelection::Both).unwrap();
        let b = run_experiment(&cfg, PolicySelection::Both).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json(), "{name}");
        for p in [Policy::TrialBased, Policy::StageBased] {
            assert_eq!(
                trace_to_csv_string(&a.runs[&p].trace),
                trace_to_csv_string(&b.runs[&p].trace),
                "{name} {p}"
            );
        }
    }
}

#[test]
fn single_policy_selection() {
    let out = run_experiment(&bundled("fig1_example"), PolicySelection::Stage).unwrap();
    assert!(out.report.trial_based.is_none());
    assert!(out.report.ratios.is_none());
    assert_eq!(out.runs.len(), 1);
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&bundled("fig1_example"), PolicySelection::Both).unwrap();
    let written = write_artifacts(&out, dir.path()).unwrap();
    assert_eq!(written.len(), 5);

    let report = parse_report(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.to_json(), out.report.to_json());

    let text = std::fs::read_to_string(dir.path().join("trace_stage.csv")).unwrap();
    let trace = parse_trace_csv(&text).unwrap();
    assert_eq!(trace_to_csv_string(&trace), text);
    let svg = std::fs::read_to_string(dir.path().join("gantt_stage.svg")).unwrap();
    assert_eq!(render_gantt(&trace).unwrap(), svg);
}

#[test]
fn fig1_gantt_has_two_rows_and_seven_bars() {
    let out = run_experiment(&bundled("fig1_example"), PolicySelection::Stage).unwrap();
    let svg = render_gantt(&out.runs[&Policy::StageBased].trace).unwrap();
    assert_eq!(svg.matches(r#"class="row""#).count(), 2);
    assert_eq!(svg.matches(r#"class="bar""#).count(), 7);
    assert_eq!(svg.matches("edge solid").count() + svg.matches("edge dashed").count(), 6);
}

#[test]
fn compare_grid_and_sha() {
    let reports: Vec<_> = ["resnet_grid", "resnet_sha"]
        .iter()
        .map(|n| run_experiment(&bundled(n), PolicySelection::Both).unwrap().report)
        .collect();
    let rows = compare_rows(&reports);
    assert_eq!(rows.len(), 4);
    let gpu = |exp: &str, policy: &str| {
        rows.iter()
            .find(|r| r.experiment == exp && r.policy == policy)
            .unwrap()
            .gpu_hours
    };
    for p in ["trial_based", "stage_based"] {
        assert!(gpu("resnet_sha", p) < gpu("resnet_grid", p));
    }
    let table = format_table(&rows);
    assert_eq!(table.lines().count(), 5);
    let csv = format_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(format_table(&rows), table);
}

#[test]
fn malformed_reports_report_a_position() {
    let err = parse_report("{\n  \"name\": 3\n}").unwrap_err().to_string();
    assert!(err.starts_with("line 2"), "{err}");
}
