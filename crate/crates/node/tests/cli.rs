//! The `edgegrid` binary, driven as a user would.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use edgegrid_transport::wire::RunId;

fn edgegrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgegrid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn ybus_prints_the_three_bus_matrix() {
    let out = edgegrid(&["ybus", common::CASE3]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let mut y = [[0.0f64; 3]; 3];
    for line in text(&out.stdout).lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (i, j): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        assert_eq!(f[2].parse::<f64>().unwrap(), 0.0);
        y[i - 1][j - 1] = f[3].parse().unwrap();
    }
    // 1/x of each line on the off-diagonals, see the fixture header
    assert_eq!(y, [[-14.0, 10.0, 4.0], [10.0, -15.0, 5.0], [4.0, 5.0, -9.0]]);
}

#[test]
fn unknown_run_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let run = RunId::from_seed(4242).to_string();
    let out = edgegrid(&["--store-root", store.to_str().unwrap(), "report", &run]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains(&run));
}

#[test]
fn bad_invocations_are_usage_errors() {
    assert_eq!(edgegrid(&["demo", "nonsense"]).status.code(), Some(1));
    assert_eq!(edgegrid(&["--set", "no.such=1", "ybus"]).status.code(), Some(1));
    assert_eq!(edgegrid(&["ybus", "/nonexistent/case.txt"]).status.code(), Some(1));
}

#[test]
fn simulate_reports_a_verdict() {
    let out = edgegrid(&["simulate", common::CASE9, "t_clear=0.2"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(
        text(&out.stderr).to_lowercase().contains("verdict: stable"),
        "{}",
        text(&out.stderr)
    );
}

fn live_demo(dir: &Path, extra: &[&str]) -> Output {
    let work = dir.join("work");
    let set = format!("demo.work_dir={}", work.display());
    let mut args = vec!["--set", &set];
    args.extend_from_slice(extra);
    args.extend(["demo", "topology"]);
    edgegrid(&args)
}

#[test]
fn topology_demo_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let out = live_demo(dir.path(), &[]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}\n{}",
        text(&out.stdout),
        text(&out.stderr)
    );
    let summary = text(&out.stdout);
    assert!(summary.contains("bit for bit: yes"), "{summary}");
    assert!(!summary.contains("PARTIAL"), "{summary}");

    // the report subcommand rebuilds the same CSV from the logs
    let work = dir.path().join("work");
    let run = RunId::from_seed(1).to_string();
    let rep = edgegrid(&[
        "--log-dir",
        work.join("logs").to_str().unwrap(),
        "--store-root",
        work.join("store").to_str().unwrap(),
        "report",
        &run,
    ]);
    assert!(rep.status.success(), "{}", text(&rep.stderr));
    assert_eq!(
        text(&rep.stdout),
        std::fs::read_to_string(work.join("report.csv")).unwrap()
    );
}

/// Without emulated impairment a UE report crosses loopback in well under
/// one 5G hop.
#[test]
fn unimpaired_loopback_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let out = live_demo(dir.path(), &["--profile", common::ZERO_PROFILE]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}\n{}",
        text(&out.stdout),
        text(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("work/report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut pairs = 0;
    for recv in rows.iter().filter(|r| r[1] == "edge_recv") {
        // edge_recv names the UE as peer; the matching ue_send names the edge
        let send = rows
            .iter()
            .find(|s| s[1] == "ue_send" && s[2] == recv[4] && s[4] == recv[2] && s[5] == recv[5])
            .expect("every receipt has its send");
        let dt: f64 = recv[6].parse::<f64>().unwrap() - send[6].parse::<f64>().unwrap();
        assert!((0.0..5.0).contains(&dt), "ue->edge {dt} ms");
        pairs += 1;
    }
    assert_eq!(pairs, 3);
}
