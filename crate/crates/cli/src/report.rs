//! Run reports and their text, JSON and CSV renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use srf_core::curvature::{Verdict, VerificationReport};

/// Exit classes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub source: String,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

/// Everything a run produced, apart from trajectory tables.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub scenario: ScenarioInfo,
    pub seed: u64,
    pub threads: usize,
    pub tolerances: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<VerificationReport>,
    /// Command-specific output.
    pub result: serde_json::Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Wall-clock time; only recorded on request since it breaks
    /// byte-identical reruns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    pub exit_code: i32,
}

pub fn exit_code_for(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::Pass => EXIT_PASS,
        Verdict::Violation => EXIT_VIOLATION,
        Verdict::Inconclusive => EXIT_NUMERICAL,
    }
}

/// Rows of `time,vertex,value` with an optional trailing column.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub extra: Option<String>,
    pub rows: Vec<(f64, String, f64, Option<f64>)>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["time", "vertex", "value"];
        if let Some(extra) = &self.extra {
            header.push(extra);
        }
        w.write_record(&header).expect("in-memory writer");
        for (t, v, x, e) in &self.rows {
            let mut rec = vec![fmt_f64(*t), v.clone(), fmt_f64(*x)];
            if self.extra.is_some() {
                rec.push(e.map(fmt_f64).unwrap_or_default());
            }
            w.write_record(&rec).expect("in-memory writer");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("UTF-8 records")
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn verification_csv(reports: &[VerificationReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["criterion", "verdict", "margin", "tolerance", "samples", "inconclusive", "straddling"]).expect("in-memory writer");
    for r in reports {
        w.write_record([
            r.criterion.name().to_string(),
            verdict_name(r.verdict).to_string(),
            fmt_f64(r.margin),
            fmt_f64(r.tolerance),
            r.diagnostics.samples.to_string(),
            r.diagnostics.inconclusive.to_string(),
            r.diagnostics.straddling.to_string(),
        ])
        .expect("in-memory writer");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("UTF-8 records")
}

pub fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Violation => "violation",
        Verdict::Inconclusive => "inconclusive",
    }
}

/// Aligned human-readable summary.
pub fn to_text(r: &RunReport) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k:<12} {v}");
    };
    line("command", r.command.clone());
    line("scenario", format!("{} ({})", r.scenario.name, r.scenario.source));
    line("digest", r.scenario.digest.clone());
    line("seed", r.seed.to_string());
    if let Some(v) = r.verdict {
        line("verdict", verdict_name(v).to_string());
    }
    if !r.reports.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<20} {:<13} {:>12} {:>10} {:>8} {:>11}", "criterion", "verdict", "margin", "tolerance", "samples", "straddling");
        for c in &r.reports {
            let _ = writeln!(
                out,
                "{:<20} {:<13} {:>12.4e} {:>10.1e} {:>8} {:>11}",
                c.criterion.name(),
                verdict_name(c.verdict),
                c.margin,
                c.tolerance,
                c.diagnostics.samples,
                c.diagnostics.straddling
            );
            if let (Verdict::Violation, Some(w)) = (c.verdict, &c.witness) {
                let times: Vec<String> = w.times.iter().map(|t| format!("{t:.6}")).collect();
                let _ = writeln!(out, "{:<20} witness at t = {}", "", times.join(", "));
            }
        }
    }
    if let serde_json::Value::Object(map) = &r.result {
        if !map.is_empty() {
            let _ = writeln!(out);
        }
        for (k, v) in map {
            let shown = match v {
                serde_json::Value::Array(a) if a.len() > 8 => format!("[{} entries]", a.len()),
                serde_json::Value::Object(_) => "{…}".to_string(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k:<20} {shown}");
        }
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    if let Some(t) = &r.timing {
        let _ = writeln!(out, "{:<12} {:.3} s", "wall time", t.wall_seconds);
    }
    out
}
