//! Two-policy comparison reports and cross-report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimReport;
use crate::tree::StageTreeStats;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}, column {column}: {message}")]
    Json { line: usize, column: usize, message: String },
    #[error("report {0} has no runs")]
    Empty(String),
}

/// Trial-based over stage-based; `None` when the stage-based value is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub end_to_end: Option<f64>,
    pub gpu_hours: Option<f64>,
    pub epochs: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

impl Ratios {
    pub fn between(trial: &SimReport, stage: &SimReport) -> Self {
        Ratios {
            end_to_end: ratio(trial.end_to_end_s, stage.end_to_end_s),
            gpu_hours: ratio(trial.gpu_seconds, stage.gpu_seconds),
            epochs: ratio(trial.epochs_trained as f64, stage.epochs_trained as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub algorithm: String,
    pub seed: u64,
    pub trials: usize,
    /// Stats of the unpruned tree over all trials.
    pub tree: StageTreeStats,
    pub trial_based: Option<SimReport>,
    pub stage_based: Option<SimReport>,
    pub ratios: Option<Ratios>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn runs(&self) -> impl Iterator<Item = &SimReport> {
        self.trial_based.iter().chain(self.stage_based.iter())
    }
}

pub fn parse_report(text: &str) -> Result<ComparisonReport, ReportError> {
    let r: ComparisonReport = serde_json::from_str(text).map_err(|e| ReportError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if r.trial_based.is_none() && r.stage_based.is_none() {
        return Err(ReportError::Empty(r.name));
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub experiment: String,
    pub algorithm: String,
    pub policy: String,
    pub end_to_end_s: f64,
    pub gpu_hours: f64,
    pub epochs_trained: u64,
    pub best_accuracy: Option<f64>,
    pub end_to_end_ratio: Option<f64>,
    pub gpu_hours_ratio: Option<f64>,
    pub epochs_ratio: Option<f64>,
}

/// One row per policy run in each report.
pub fn compare_rows(reports: &[ComparisonReport]) -> Vec<CompareRow> {
    let mut rows = Vec::new();
    for r in reports {
        for run in r.runs() {
            rows.push(CompareRow {
                experiment: r.name.clone(),
                algorithm: r.algorithm.clone(),
                policy: run.policy.to_string(),
                end_to_end_s: run.end_to_end_s,
                gpu_hours: run.gpu_hours,
                epochs_trained: run.epochs_trained,
                best_accuracy: run.best_accuracy(),
                end_to_end_ratio: r.ratios.and_then(|x| x.end_to_end),
                gpu_hours_ratio: r.ratios.and_then(|x| x.gpu_hours),
                epochs_ratio: r.ratios.and_then(|x| x.epochs),
            });
        }
    }
    rows
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

const HEADERS: [&str; 10] = [
    "experiment",
    "algorithm",
    "policy",
    "end_to_end_s",
    "gpu_hours",
    "epochs",
    "best_acc",
    "e2e_ratio",
    "gpu_ratio",
    "epoch_ratio",
];

fn cells(r: &CompareRow) -> [String; 10] {
    [
        r.experiment.clone(),
        r.algorithm.clone(),
        r.policy.clone(),
        format!("{:.1}", r.end_to_end_s),
        format!("{:.4}", r.gpu_hours),
        r.epochs_trained.to_string(),
        opt(r.best_accuracy, 4),
        opt(r.end_to_end_ratio, 3),
        opt(r.gpu_hours_ratio, 3),
        opt(r.epochs_ratio, 3),
    ]
}

/// Fixed-width text table; numeric columns right-aligned.
pub fn format_table(rows: &[CompareRow]) -> String {
    let body: Vec<[String; 10]> = rows.iter().map(cells).collect();
    let mut widths: Vec<usize> = HEADERS.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let parts: Vec<String> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i < 3 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&HEADERS.map(String::from));
    for row in &body {
        line(row);
    }
    out
}

pub fn format_csv(rows: &[CompareRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADERS).expect("in-memory write");
    for r in rows {
        w.write_record(cells(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
}
