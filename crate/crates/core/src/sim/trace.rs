//! Event trace records and their CSV form.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_COLUMNS: [&str; 8] = [
    "time_s", "event", "stage_id", "trial_id", "worker_id", "node", "gpus", "detail",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    WorkerCreate,
    WorkerDestroy,
    Launch,
    Complete,
    Oom,
    Cancel,
    Truncate,
    UnitFailed,
    TrialReached,
    TrialStopped,
    TrialFailed,
    Prune,
}

impl TraceEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceEvent::WorkerCreate => "worker_create",
            TraceEvent::WorkerDestroy => "worker_destroy",
            TraceEvent::Launch => "launch",
            TraceEvent::Complete => "complete",
            TraceEvent::Oom => "oom",
            TraceEvent::Cancel => "cancel",
            TraceEvent::Truncate => "truncate",
            TraceEvent::UnitFailed => "unit_failed",
            TraceEvent::TrialReached => "trial_reached",
            TraceEvent::TrialStopped => "trial_stopped",
            TraceEvent::TrialFailed => "trial_failed",
            TraceEvent::Prune => "prune",
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_s: f64,
    pub event: TraceEvent,
    #[serde(default)]
    pub stage_id: String,
    #[serde(default)]
    pub trial_id: String,
    #[serde(default)]
    pub worker_id: String,
    pub node: Option<u32>,
    pub gpus: Option<u32>,
    #[serde(default)]
    pub detail: String,
}

impl TraceRecord {
    pub fn new(time_s: f64, event: TraceEvent) -> Self {
        TraceRecord {
            time_s,
            event,
            stage_id: String::new(),
            trial_id: String::new(),
            worker_id: String::new(),
            node: None,
            gpus: None,
            detail: String::new(),
        }
    }

    /// Value of `key` in a `k=v;k=v` detail string.
    pub fn detail_value(&self, key: &str) -> Option<&str> {
        self.detail
            .split(';')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line 1: trace header must be {expected}, found {found}")]
    Header { expected: String, found: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_trace_csv<W: io::Write>(records: &[TraceRecord], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(TRACE_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_to_csv_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_COLUMNS {
        return Err(TraceError::Header {
            expected: TRACE_COLUMNS.join(","),
            found: header.join(","),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<TraceRecord>() {
        let rec = row.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        if !rec.time_s.is_finite() || rec.time_s < 0.0 {
            return Err(TraceError::Parse {
                line: out.len() as u64 + 2,
                message: format!("time_s must be a non-negative number, got {}", rec.time_s),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Totals recomputed from a trace alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceSummary {
    pub end_to_end_s: f64,
    pub gpu_seconds: f64,
    pub epochs_trained: u64,
    pub launches: u64,
    pub oom_failures: u64,
}

impl TraceSummary {
    pub fn gpu_hours(&self) -> f64 {
        self.gpu_seconds / 3600.0
    }
}

/// Pairs every `complete`/`oom` record with its `launch` on the same
/// worker and accumulates busy time and epochs.
pub fn summarize_trace(records: &[TraceRecord]) -> Result<TraceSummary, TraceError> {
    let mut open: BTreeMap<&str, (&TraceRecord, usize)> = BTreeMap::new();
    let mut s = TraceSummary::default();
    for (i, r) in records.iter().enumerate() {
        let line = i as u64 + 2;
        match r.event {
            TraceEvent::Launch => {
                s.launches += 1;
                open.insert(r.worker_id.as_str(), (r, i));
            }
            TraceEvent::Complete | TraceEvent::Oom => {
                let (l, _) = open.remove(r.worker_id.as_str()).ok_or_else(|| TraceError::Parse {
                    line,
                    message: format!("{} on {} without a launch", r.event, r.worker_id),
                })?;
                let gpus = l.gpus.unwrap_or(0);
                s.gpu_seconds += (r.time_s - l.time_s) * f64::from(gpus);
                s.end_to_end_s = s.end_to_end_s.max(r.time_s);
                if r.event == TraceEvent::Oom {
                    s.oom_failures += 1;
                } else {
                    let epochs = r.detail_value("epochs").and_then(|v| v.parse::<u64>().ok());
                    s.epochs_trained += epochs.ok_or_else(|| TraceError::Parse {
                        line,
                        message: "complete record without epochs=".into(),
                    })?;
                }
            }
            _ => {}
        }
    }
    if let Some((w, (_, i))) = open.into_iter().next() {
        return Err(TraceError::Parse {
            line: i as u64 + 2,
            message: format!("launch on {w} never finished"),
        });
    }
    Ok(s)
}
