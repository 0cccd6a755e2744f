//! Run-trace artifacts: the versioned per-run record schema, plot-ready CSV
//! series, and post-hoc report rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineEvent, RunOutcome};

pub const TRACE_SCHEMA: &str = "hetsim-trace/1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace parse failure: {0}")]
    Parse(String),
}

/// One schedule run, as persisted in the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: u64,
    pub sct: String,
    pub sct_id: String,
    pub workload: String,
    pub action: String,
    pub fission: String,
    pub overlap: u32,
    pub split_cpu: f64,
    pub split_gpu: f64,
    pub parallelism: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<f64>,
    pub lbt: f64,
    pub wall_ms: f64,
    /// Work time accumulated by each execution slot.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slot_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub wgs: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub search: Vec<SearchRow>,
}

/// One profile-search evaluation, flattened for the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub fission: String,
    pub overlap: u32,
    pub wgs: u64,
    pub cpu_share: f64,
    pub time_ms: f64,
    pub stored: bool,
    pub note: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceFile {
    schema: String,
    #[serde(default, rename = "run")]
    runs: Vec<TraceRecord>,
}

impl TraceRecord {
    pub fn from_outcome(sct_name: &str, outcome: &RunOutcome) -> Self {
        let search = outcome
            .search
            .as_ref()
            .map(|t| {
                t.steps
                    .iter()
                    .map(|s| SearchRow {
                        fission: s.fission.label().to_string(),
                        overlap: s.overlap,
                        wgs: s.wgs.values().copied().max().unwrap_or(1),
                        cpu_share: s.cpu_share,
                        time_ms: s.time_ms,
                        stored: s.stored,
                        note: s.note.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        TraceRecord {
            index: outcome.run_index,
            sct: sct_name.to_string(),
            sct_id: outcome.sct_id.0.clone(),
            workload: outcome.workload.label(),
            action: outcome.action.label(),
            fission: outcome.config.platform.fission_level.label().to_string(),
            overlap: outcome.config.platform.overlap,
            split_cpu: outcome.config.split.cpu,
            split_gpu: outcome.config.split.gpu,
            parallelism: outcome.config.parallelism as u64,
            cpu_time_ms: outcome.stats.cpu_time,
            gpu_time_ms: outcome.stats.gpu_time,
            dev: outcome.stats.dev,
            lbt: outcome.stats.lbt,
            wall_ms: outcome.stats.wall_ms,
            slot_times: outcome.stats.per_slot_times.clone(),
            wgs: outcome.config.platform.wgs_per_kernel.clone(),
            events: outcome.events.iter().map(EngineEvent::label).collect(),
            search,
        }
    }
}

pub fn to_toml(records: &[TraceRecord]) -> String {
    let file = TraceFile { schema: TRACE_SCHEMA.to_string(), runs: records.to_vec() };
    toml::to_string(&file).expect("trace serializes")
}

pub fn from_toml(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let file: TraceFile = toml::from_str(text).map_err(|e| TraceError::Parse(e.to_string()))?;
    if file.schema != TRACE_SCHEMA {
        return Err(TraceError::Parse(format!(
            "unsupported trace schema '{}', expected '{TRACE_SCHEMA}'",
            file.schema
        )));
    }
    Ok(file.runs)
}

/// Plot series: one CSV row per run.
pub fn to_series_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from("run,cpu_share,gpu_share,dev,lbt,wall_ms\n");
    for r in records {
        let dev = r.dev.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.index, r.split_cpu, r.split_gpu, dev, r.lbt, r.wall_ms
        ));
    }
    out
}

// ── Reporting ───────────────────────────────────────────────────────────────

/// Key figures of one trace, plus a rendered text report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: u64,
    pub actions: BTreeMap<String, u64>,
    pub triggers: u64,
    pub shifts: u64,
    pub doubles: u64,
    pub converges: u64,
    /// Runs spent between the first shift of each balancing episode and its
    /// convergence, summed.
    pub shifting_runs: u64,
    pub unbalanced_runs: u64,
    pub mean_wall_ms: f64,
    pub final_split_cpu: f64,
    pub final_lbt: f64,
    pub text: String,
}

pub fn summarize(records: &[TraceRecord]) -> ReportSummary {
    let mut actions: BTreeMap<String, u64> = BTreeMap::new();
    let mut triggers = 0;
    let mut shifts = 0;
    let mut doubles = 0;
    let mut converges = 0;
    let mut unbalanced_runs = 0;
    let mut shifting_runs = 0;
    let mut shift_started: Option<u64> = None;
    let mut wall_sum = 0.0;

    for r in records {
        let action_kind = r.action.split('(').next().unwrap_or(&r.action).to_string();
        *actions.entry(action_kind).or_insert(0) += 1;
        wall_sum += r.wall_ms;
        // Counted against the default maxDev; the report has no access to the
        // scenario parameters, callers needing exactness use the series.
        if r.dev.map(|d| d < 0.85).unwrap_or(false) {
            unbalanced_runs += 1;
        }
        for e in &r.events {
            if e == "trigger" {
                triggers += 1;
            } else if e.starts_with("shift(") {
                shifts += 1;
                shift_started.get_or_insert(r.index);
            } else if e == "double" {
                doubles += 1;
            } else if e == "converge" {
                converges += 1;
                if let Some(start) = shift_started.take() {
                    shifting_runs += r.index - start;
                }
            }
        }
    }

    let runs = records.len() as u64;
    let mean_wall_ms = if runs > 0 { wall_sum / runs as f64 } else { 0.0 };
    let final_split_cpu = records.last().map(|r| r.split_cpu).unwrap_or(0.0);
    let final_lbt = records.last().map(|r| r.lbt).unwrap_or(0.0);

    let mut text = String::new();
    text.push_str(&format!("runs: {runs}\n"));
    text.push_str("actions:\n");
    for (a, n) in &actions {
        text.push_str(&format!("  {a:<10} {n}\n"));
    }
    text.push_str(&format!(
        "balance events: {triggers} trigger(s), {shifts} shift(s), {doubles} double(s), {converges} converge(s)\n"
    ));
    text.push_str(&format!("shifting-phase runs: {shifting_runs}\n"));
    text.push_str(&format!("mean wall time: {mean_wall_ms:.4} ms\n"));
    text.push_str(&format!(
        "final split: cpu {:.4} / gpu {:.4}, lbt {:.4}\n",
        final_split_cpu,
        records.last().map(|r| r.split_gpu).unwrap_or(0.0),
        final_lbt
    ));
    if let Some(built) = records.iter().find(|r| !r.search.is_empty()) {
        text.push_str(&format!(
            "profile search at run {}: {} evaluations\n",
            built.index,
            built.search.len()
        ));
        text.push_str("  fission overlap wgs cpu_share time_ms stored note\n");
        for s in &built.search {
            text.push_str(&format!(
                "  {:<7} {:<7} {:<4} {:<9.4} {:<9.4} {:<6} {}\n",
                s.fission, s.overlap, s.wgs, s.cpu_share, s.time_ms, s.stored, s.note
            ));
        }
    }

    ReportSummary {
        runs,
        actions,
        triggers,
        shifts,
        doubles,
        converges,
        shifting_runs,
        unbalanced_runs,
        mean_wall_ms,
        final_split_cpu,
        final_lbt,
        text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(index: u64, events: &[&str]) -> TraceRecord {
        TraceRecord {
            index,
            sct: "t".into(),
            sct_id: "id".into(),
            workload: "64:single".into(),
            action: "reused".into(),
            fission: "NO_FISSION".into(),
            overlap: 1,
            split_cpu: 0.25,
            split_gpu: 0.75,
            parallelism: 2,
            cpu_time_ms: Some(1.0),
            gpu_time_ms: Some(1.0),
            dev: Some(1.0),
            lbt: 0.0,
            wall_ms: 1.0,
            slot_times: vec![1.0, 1.0],
            wgs: BTreeMap::new(),
            events: events.iter().map(|s| s.to_string()).collect(),
            search: Vec::new(),
        }
    }

    #[test]
    fn trace_round_trips_through_toml() {
        let records = vec![record(0, &["trigger", "shift(-1)"]), record(1, &["converge"])];
        let text = to_toml(&records);
        let back = from_toml(&text).unwrap();
        assert_eq!(records, back);
        assert_eq!(text, to_toml(&back));
    }

    #[test]
    fn summary_counts_balance_events_and_shifting_span() {
        let records = vec![
            record(0, &["trigger", "shift(-1)"]),
            record(1, &["shift(-1)"]),
            record(2, &["double", "shift(-1)"]),
            record(3, &["refine"]),
            record(4, &["converge"]),
        ];
        let s = summarize(&records);
        assert_eq!(s.triggers, 1);
        assert_eq!(s.shifts, 3);
        assert_eq!(s.doubles, 1);
        assert_eq!(s.converges, 1);
        assert_eq!(s.shifting_runs, 4);
        assert!(s.text.contains("balance events"));
    }

    #[test]
    fn unknown_schema_is_rejected() {
        assert!(from_toml("schema = \"hetsim-trace/9\"\n").is_err());
    }

    #[test]
    fn series_csv_has_one_row_per_run() {
        let csv = to_series_csv(&[record(0, &[]), record(1, &[])]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("run,cpu_share,gpu_share,dev,lbt,wall_ms"));
    }
}
