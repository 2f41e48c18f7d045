//! SVG Gantt chart of a simulation trace: one row per GPU.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::sim::{TraceError, TraceEvent, TraceRecord};

const LEFT: f64 = 110.0;
const WIDTH: f64 = 900.0;
const TOP: f64 = 30.0;
const ROW: f64 = 22.0;
const BAR: f64 = 16.0;
const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#76b7b2", "#edc948", "#b07aa1", "#ff9da7", "#9c755f",
    "#bab0ac", "#86bcb6", "#d4a6c8", "#a0cbe8",
];

#[derive(Debug, Clone)]
struct Bar {
    gpus: Vec<u32>,
    start: f64,
    end: f64,
    stage: String,
    parent: String,
    load: bool,
    oom: bool,
}

fn color(stage: &str) -> &'static str {
    // Trial-based units are labelled `<trial>#<chunk>`: color by trial.
    let key = stage.split('#').next().unwrap_or(stage);
    let h = key
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    PALETTE[(h % PALETTE.len() as u64) as usize]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn parse_err(line: usize, message: String) -> TraceError {
    TraceError::Parse {
        line: line as u64 + 2,
        message,
    }
}

fn collect_bars(records: &[TraceRecord]) -> Result<(Vec<Bar>, BTreeMap<u32, u32>), TraceError> {
    let mut workers: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    let mut nodes: BTreeMap<u32, u32> = BTreeMap::new();
    let mut open: BTreeMap<&str, (usize, &TraceRecord)> = BTreeMap::new();
    let mut bars = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.event {
            TraceEvent::WorkerCreate => {
                let ids = r
                    .detail_value("gpu_ids")
                    .ok_or_else(|| parse_err(i, "worker_create without gpu_ids".into()))?;
                let gpus: Vec<u32> = ids
                    .split(' ')
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err(i, format!("bad gpu_ids {ids:?}")))?;
                if gpus.is_empty() || r.gpus.is_some_and(|g| g as usize != gpus.len()) {
                    return Err(parse_err(i, "gpu_ids disagree with gpus".into()));
                }
                for g in &gpus {
                    nodes.insert(*g, r.node.unwrap_or(0));
                }
                workers.insert(&r.worker_id, gpus);
            }
            TraceEvent::Launch => {
                if !workers.contains_key(r.worker_id.as_str()) {
                    return Err(parse_err(i, format!("launch on unknown worker {:?}", r.worker_id)));
                }
                if open.insert(&r.worker_id, (i, r)).is_some() {
                    return Err(parse_err(i, format!("worker {} launched twice", r.worker_id)));
                }
            }
            TraceEvent::Complete | TraceEvent::Oom => {
                let (_, l) = open
                    .remove(r.worker_id.as_str())
                    .ok_or_else(|| parse_err(i, format!("{} without a launch", r.event)))?;
                if r.time_s < l.time_s {
                    return Err(parse_err(i, "ends before it starts".into()));
                }
                bars.push(Bar {
                    gpus: workers[r.worker_id.as_str()].clone(),
                    start: l.time_s,
                    end: r.time_s,
                    stage: l.stage_id.clone(),
                    parent: l.detail_value("parent").unwrap_or("").to_string(),
                    load: l.detail_value("load") == Some("1"),
                    oom: r.event == TraceEvent::Oom,
                });
            }
            _ => {}
        }
    }
    if let Some((_, (i, r))) = open.into_iter().next() {
        return Err(parse_err(i, format!("launch of {} never finished", r.stage_id)));
    }
    Ok((bars, nodes))
}

/// Renders a trace as SVG. Dependency edges are solid when the child ran
/// on its parent's worker without loading a checkpoint, dashed otherwise.
pub fn render_gantt(records: &[TraceRecord]) -> Result<String, TraceError> {
    let (bars, nodes) = collect_bars(records)?;
    let rows: BTreeMap<u32, usize> = nodes.keys().enumerate().map(|(i, g)| (*g, i)).collect();
    let horizon = bars.iter().map(|b| b.end).fold(0.0, f64::max).max(1e-9);
    let x = |t: f64| LEFT + t / horizon * WIDTH;
    let y = |gpu: u32| TOP + rows[&gpu] as f64 * ROW;
    let height = TOP + rows.len() as f64 * ROW + 30.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="10">"#,
        LEFT + WIDTH + 20.0,
        height
    );
    s.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 6 6\" refX=\"6\" refY=\"3\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L6,3 L0,6 z\"/></marker></defs>\n",
    );
    for (gpu, node) in &nodes {
        let top = y(*gpu);
        let _ = writeln!(
            s,
            r##"<g class="row"><rect x="{LEFT:.2}" y="{top:.2}" width="{WIDTH:.2}" height="{ROW:.2}" fill="none" stroke="#eeeeee"/><text x="4" y="{:.2}">node {node} gpu {gpu}</text></g>"##,
            top + ROW * 0.7
        );
    }
    for b in &bars {
        for g in &b.gpus {
            let (x0, x1) = (x(b.start), x(b.end));
            let top = y(*g) + (ROW - BAR) / 2.0;
            let (class, fill) = if b.oom { ("bar oom", "#d62728") } else { ("bar", color(&b.stage)) };
            let _ = write!(
                s,
                r##"<rect class="{class}" x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{BAR:.2}" fill="{fill}" stroke="#333333" stroke-width="0.5"><title>{} {:.2}-{:.2}</title></rect>"##,
                (x1 - x0).max(0.5),
                escape(&b.stage),
                b.start,
                b.end
            );
            if x1 - x0 > 28.0 {
                let _ = write!(
                    s,
                    r##"<text x="{:.2}" y="{:.2}" fill="#ffffff">{}</text>"##,
                    x0 + 3.0,
                    top + BAR * 0.75,
                    escape(&b.stage)
                );
            }
            s.push('\n');
        }
    }
    let done: BTreeMap<&str, &Bar> = bars.iter().filter(|b| !b.oom).map(|b| (b.stage.as_str(), b)).collect();
    for b in bars.iter().filter(|b| !b.oom && !b.parent.is_empty()) {
        let Some(p) = done.get(b.parent.as_str()) else { continue };
        let (class, style) = if b.load {
            ("edge dashed", r##"stroke="#d62728" stroke-dasharray="4 3""##)
        } else {
            ("edge solid", r##"stroke="#000000""##)
        };
        let _ = writeln!(
            s,
            r#"<line class="{class}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {style} marker-end="url(#arrow)"/>"#,
            x(p.end),
            y(p.gpus[0]) + ROW / 2.0,
            x(b.start),
            y(b.gpus[0]) + ROW / 2.0
        );
    }
    let axis = TOP + rows.len() as f64 * ROW + 12.0;
    for i in 0..=5 {
        let t = horizon * f64::from(i) / 5.0;
        let _ = writeln!(s, r#"<text class="tick" x="{:.2}" y="{axis:.2}" text-anchor="middle">{t:.1}s</text>"#, x(t));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
