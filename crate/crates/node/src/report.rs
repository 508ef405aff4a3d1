//! Per-run stage timings rebuilt from node logs.
//!
//! Times are in milliseconds relative to the cloud's `run_open` line for
//! the run, so UE sends that preceded the run come out negative.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use edgegrid_core::grid::RegionId;
use edgegrid_transport::store::{Artifact, FsStore, StoreKey};
use edgegrid_transport::wire::{from_payload, RunId};
use thiserror::Error;

use crate::compute::RunOutcome;
use crate::logging::{parse_line, LogLine};

pub const CSV_HEADER: &str = "run_id,stage,node,region,peer,seq,t_ms";

/// Stages in the order they happen.
pub const STAGES: &[&str] = &[
    "ue_send",
    "edge_recv",
    "run_open",
    "edge_compute_done",
    "store_put_done",
    "barrier_done",
    "sim_done",
    "result_recv",
    "run_aborted",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no log line or stored artifact mentions run {0}")]
    UnknownRun(RunId),
    #[error("reading logs in {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: String,
    pub node: String,
    pub region: Option<RegionId>,
    pub peer: Option<String>,
    pub seq: Option<u64>,
    pub t_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    TimedOut { missing: Vec<RegionId> },
    Failed(String),
    Incomplete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub run_id: RunId,
    pub rows: Vec<StageRow>,
    pub status: RunStatus,
    pub outcome: Option<RunOutcome>,
    /// Why the report is partial; empty when every expected line was found.
    pub gaps: Vec<String>,
}

fn read_logs(dir: &Path) -> Result<Vec<LogLine>, ReportError> {
    if dir.as_os_str().is_empty() {
        return Ok(Vec::new());
    }
    let io = |source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut files: Vec<_> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "log"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io(e)),
    };
    files.sort();
    let mut lines = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(io)?;
        lines.extend(text.lines().filter_map(parse_line));
    }
    Ok(lines)
}

fn region_of(line: &LogLine) -> Option<RegionId> {
    line.get("region")?.parse().ok()
}

pub fn build_report(run: RunId, log_dir: &Path, store: Option<&FsStore>) -> Result<Report, ReportError> {
    let lines = read_logs(log_dir)?;
    let run_s = run.to_string();
    let stored: Vec<StoreKey> = store
        .and_then(|s| s.list(&format!("runs/{run_s}/")).ok())
        .unwrap_or_default();
    let mine = |l: &LogLine| l.get("run") == Some(run_s.as_str());
    if !lines.iter().any(mine) && stored.is_empty() {
        return Err(ReportError::UnknownRun(run));
    }
    let mut gaps = Vec::new();

    // node -> region, from the lines nodes write when they come up
    let mut node_region: BTreeMap<&str, RegionId> = BTreeMap::new();
    for l in &lines {
        if matches!(l.event.as_str(), "edge_listening" | "ue_hello") {
            if let Some(r) = region_of(l) {
                node_region.insert(&l.node, r);
            }
        }
    }

    let open = lines.iter().find(|l| l.event == "run_open" && mine(l));
    let expected: BTreeSet<RegionId> = open
        .and_then(|l| l.get("regions"))
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_default();
    let t0 = match open.and_then(LogLine::t_ms) {
        Some(t) => t,
        None => {
            gaps.push("cloud log has no run_open line for this run".into());
            lines
                .iter()
                .filter(|l| mine(l))
                .filter_map(LogLine::t_ms)
                .fold(f64::INFINITY, f64::min)
        }
    };
    let t0 = if t0.is_finite() { t0 } else { 0.0 };

    let mut rows = Vec::new();
    let row = |l: &LogLine, region: Option<RegionId>, peer: Option<String>, seq: Option<u64>| StageRow {
        stage: l.event.clone(),
        node: l.node.clone(),
        region,
        peer,
        seq,
        t_ms: l.t_ms().unwrap_or(f64::NAN) - t0,
    };
    for l in lines.iter().filter(|l| mine(l)) {
        if !STAGES.contains(&l.event.as_str()) {
            continue;
        }
        let region = region_of(l).or_else(|| node_region.get(l.node.as_str()).copied());
        rows.push(row(l, region, None, None));
    }

    // UE reports an edge folded into this run: those received after the
    // edge's previous run started and before this one reached it.
    let mut run_recv: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for l in lines.iter().filter(|l| l.event == "run_recv") {
        if let Some(t) = l.t_ms() {
            run_recv.entry(&l.node).or_default().push((t, mine(l)));
        }
    }
    let mut sends: BTreeMap<(&str, u64), Vec<&LogLine>> = BTreeMap::new();
    for l in lines.iter().filter(|l| l.event == "ue_send") {
        if let Some(seq) = l.get("seq").and_then(|s| s.parse().ok()) {
            sends.entry((&l.node, seq)).or_default().push(l);
        }
    }
    for (edge, mut opens) in run_recv {
        opens.sort_by(|a, b| a.0.total_cmp(&b.0));
        let Some(i) = opens.iter().position(|o| o.1) else {
            continue;
        };
        let hi = opens[i].0;
        let lo = if i > 0 { opens[i - 1].0 } else { f64::NEG_INFINITY };
        for l in lines.iter().filter(|l| l.event == "edge_recv" && l.node == edge) {
            let Some(t) = l.t_ms() else { continue };
            if t <= lo || t > hi {
                continue;
            }
            let ue = l.get("ue").unwrap_or("?").to_string();
            let seq = l.get("seq").and_then(|s| s.parse().ok());
            let region = node_region.get(edge).copied();
            rows.push(row(l, region, Some(ue.clone()), seq));
            if let Some(sent) = seq.and_then(|s| sends.get(&(ue.as_str(), s))) {
                // the attempt that arrived is the last one sent before receipt
                if let Some(s) = sent.iter().rfind(|s| s.t_ms().is_some_and(|ts| ts <= t)) {
                    rows.push(row(s, region, Some(edge.to_string()), seq));
                }
            }
        }
    }

    rows.sort_by(|a, b| {
        let rank = |s: &str| STAGES.iter().position(|x| *x == s).unwrap_or(STAGES.len());
        a.t_ms
            .total_cmp(&b.t_ms)
            .then(rank(&a.stage).cmp(&rank(&b.stage)))
            .then(a.node.cmp(&b.node))
            .then(a.seq.cmp(&b.seq))
    });

    let has = |stage: &str| rows.iter().any(|r| r.stage == stage);
    let failed = lines
        .iter()
        .find(|l| mine(l) && l.event == "compute_failed" && l.node == open.map_or("cloud", |o| o.node.as_str()));
    let status = if has("sim_done") {
        RunStatus::Completed
    } else if let Some(a) = lines.iter().find(|l| mine(l) && l.event == "run_aborted") {
        RunStatus::TimedOut {
            missing: a
                .get("missing")
                .unwrap_or("")
                .split(',')
                .filter_map(|x| x.parse().ok())
                .collect(),
        }
    } else if let Some(f) = failed {
        RunStatus::Failed(f.get("text").unwrap_or("").to_string())
    } else {
        RunStatus::Incomplete
    };

    let region_has = |stage: &str, r: RegionId| rows.iter().any(|x| x.stage == stage && x.region == Some(r));
    let excused: BTreeSet<RegionId> = match &status {
        RunStatus::TimedOut { missing } => missing.iter().copied().collect(),
        _ => BTreeSet::new(),
    };
    for &r in expected.difference(&excused) {
        for stage in ["edge_compute_done", "store_put_done"] {
            if !region_has(stage, r) {
                gaps.push(format!("no {stage} line from region {r}"));
            }
        }
        if status == RunStatus::Completed && !region_has("result_recv", r) {
            gaps.push(format!("no result_recv line from region {r}"));
        }
    }
    if status == RunStatus::Completed && !has("barrier_done") {
        gaps.push("no barrier_done line".into());
    }

    let outcome = store.and_then(|s| {
        let key = StoreKey::artifact(run, "cloud", Artifact::Result);
        s.get(&key).ok().and_then(|b| from_payload::<RunOutcome>(&b).ok())
    });
    if status == RunStatus::Completed && store.is_some() && outcome.is_none() {
        gaps.push("result blob missing from the store".into());
    }

    Ok(Report {
        run_id: run,
        rows,
        status,
        outcome,
        gaps,
    })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                self.run_id,
                r.stage,
                r.node,
                opt(&r.region),
                opt(&r.peer),
                opt(&r.seq),
                r.t_ms
            );
        }
        out
    }

    pub fn is_partial(&self) -> bool {
        !self.gaps.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {}", self.run_id);
        let status = match &self.status {
            RunStatus::Completed => "Completed".to_string(),
            RunStatus::TimedOut { missing } => format!(
                "TimedOut (missing regions: {})",
                missing.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
            ),
            RunStatus::Failed(text) => format!("Failed ({text})"),
            RunStatus::Incomplete => "Incomplete".to_string(),
        };
        let _ = writeln!(out, "status: {status}");
        if let Some(o) = &self.outcome {
            match o.summary.verdict {
                Some(v) => {
                    let _ = writeln!(out, "verdict: {v:?}");
                }
                None => {
                    let _ = writeln!(
                        out,
                        "insecurity probability: {:.4} ({} of {} representative scenarios unstable)",
                        o.summary.insecurity_probability, o.summary.n_unstable, o.summary.n_scenarios
                    );
                }
            }
        }
        let _ = writeln!(
            out,
            "{:<18} {:>5} {:>11} {:>11} {:>11}",
            "stage", "count", "mean_ms", "min_ms", "max_ms"
        );
        for stage in STAGES {
            let ts: Vec<f64> = self.rows.iter().filter(|r| r.stage == *stage).map(|r| r.t_ms).collect();
            if ts.is_empty() {
                continue;
            }
            let mean = ts.iter().sum::<f64>() / ts.len() as f64;
            let min = ts.iter().copied().fold(f64::INFINITY, f64::min);
            let max = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(out, "{stage:<18} {:>5} {mean:>11.3} {min:>11.3} {max:>11.3}", ts.len());
        }
        if let Some(ms) = self.ue_to_edge_ms() {
            let _ = writeln!(out, "ue->edge one-way: mean {ms:.3} ms");
        }
        if self.is_partial() {
            let _ = writeln!(out, "PARTIAL REPORT:");
            for g in &self.gaps {
                let _ = writeln!(out, "  - {g}");
            }
        }
        out
    }

    /// Mean delay between a UE send and its receipt at the edge.
    pub fn ue_to_edge_ms(&self) -> Option<f64> {
        let mut d = Vec::new();
        for recv in self.rows.iter().filter(|r| r.stage == "edge_recv") {
            if let Some(send) = self
                .rows
                .iter()
                .find(|s| s.stage == "ue_send" && Some(&s.node) == recv.peer.as_ref() && s.seq == recv.seq)
            {
                d.push(recv.t_ms - send.t_ms);
            }
        }
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}
