//! End-to-end demos: one cloud, one edge per region, scripted UEs, one run.
//!
//! Live mode starts every node as its own OS process over loopback TCP.
//! Virtual mode runs them all as tasks in one process on a paused clock
//! with in-memory pipes, which makes the whole run reproducible.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use edgegrid_core::grid::{BranchStatus, GridCase, RegionId};
use edgegrid_core::sampling::{ErrorModel, ForecastSpec, LoadForecast};
use edgegrid_transport::messages::{BranchUpdate, BusLoadUpdate, ForecastReport, RunManifest, RunMode, TopologyReport};
use edgegrid_transport::store::{Artifact, FsStore, StoreKey};
use edgegrid_transport::wire::{from_payload, to_payload};
use thiserror::Error;

use crate::cluster::Cluster;
use crate::compute::{brute_force_probability, monolithic, region_forecast, RegionViews, RunOutcome};
use crate::config::{Config, Source};
use crate::controller::{submit, SubmitOutcome};
use crate::edge::EdgeState;
use crate::env::{ComputeMode, NodeEnv};
use crate::logging::Clock;
use crate::netio::Net;
use crate::report::{build_report, Report};
use crate::ue::{ScriptEntry, TopologyDelta, UeReport};
use crate::NodeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoKind {
    Topology,
    Dsa,
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
}

/// Fault used by the DSA demo: bus 7 solid fault cleared by opening line
/// 5-7, close enough to the critical clearing time that forecast errors
/// decide the outcome.
pub const DSA_FAULT_T_CLEAR: &str = "0.255";

/// Fills in the demo's scenario for every key the user left at its default.
pub fn demo_config(kind: DemoKind, cfg: &Config) -> Result<Config, NodeError> {
    let mut c = cfg.clone();
    let preset: &[(&str, &str)] = match kind {
        // the topology demo opens line 7-8, so clearing another line of the
        // ring would island bus 7
        DemoKind::Topology => &[("fault.branch", "none")],
        DemoKind::Dsa => &[("fault.branch", "4"), ("fault.t_clear", DSA_FAULT_T_CLEAR)],
    };
    for (k, v) in preset {
        c.set(k, *v, Source::Default)?;
    }
    let mode = match kind {
        DemoKind::Topology => "topology",
        DemoKind::Dsa => "dsa",
    };
    c.set("run.mode", mode, Source::Flag)?;
    Ok(c)
}

/// The reports each region's UEs send. Every UE of a region sends the same
/// script, so extra UEs only exercise idempotence.
pub fn demo_scripts(kind: DemoKind, case: &GridCase) -> BTreeMap<RegionId, Vec<ScriptEntry>> {
    let mut out = BTreeMap::new();
    for r in case.regions() {
        let mut script = Vec::new();
        match kind {
            DemoKind::Topology => {
                let mut delta = TopologyDelta::default();
                // line 7-8 out of service
                for b in case.branches.iter().filter(|b| b.owner_region == r && b.id == 6) {
                    delta.branches.push(BranchUpdate {
                        branch: b.id,
                        status: BranchStatus::Open,
                    });
                }
                // loads 4% above the base case
                for b in case.buses.iter().filter(|b| b.region == r && b.has_load() && b.id != 8) {
                    delta.buses.push(BusLoadUpdate {
                        bus: b.id,
                        p_load: b.p_load * 1.04,
                        q_load: b.q_load * 1.04,
                    });
                }
                script.push(ScriptEntry {
                    at_s: 0.0,
                    topology: Some(delta),
                    forecast: None,
                });
            }
            DemoKind::Dsa => {
                let loads: Vec<LoadForecast> = case
                    .buses
                    .iter()
                    .filter(|b| b.region == r && b.has_load())
                    .map(|b| LoadForecast {
                        bus: b.id,
                        model: if b.id % 2 == 0 {
                            ErrorModel::Uniform { a: 0.15 }
                        } else {
                            ErrorModel::gaussian(0.08)
                        },
                    })
                    .collect();
                script.push(ScriptEntry {
                    at_s: 0.0,
                    topology: None,
                    forecast: Some(loads),
                });
            }
        }
        out.insert(r, script);
    }
    out
}

/// Region views and forecasts as the edges will hold them after the
/// scripts, derived without any networking.
pub fn oracle_inputs(
    base: &GridCase,
    scripts: &BTreeMap<RegionId, Vec<ScriptEntry>>,
    default_model: ErrorModel,
) -> Result<(RegionViews, BTreeMap<RegionId, ForecastSpec>), String> {
    let mut views = RegionViews::new();
    let mut forecasts = BTreeMap::new();
    for &r in &base.regions() {
        let mut st = EdgeState::new(r, base.clone());
        for (i, e) in scripts.get(&r).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            if let Some(t) = &e.topology {
                st.apply_topology(&TopologyReport {
                    seq: i as u64 + 1,
                    node_id: "oracle".into(),
                    branches: t.branches.clone(),
                    buses: t.buses.clone(),
                })?;
            }
            if let Some(loads) = &e.forecast {
                st.apply_forecast(&ForecastReport {
                    seq: i as u64 + 1,
                    node_id: "oracle".into(),
                    loads: loads.clone(),
                })?;
            }
        }
        forecasts.insert(
            r,
            region_forecast(&st.view, r, default_model, &st.forecast_overrides).map_err(|e| e.to_string())?,
        );
        views.insert(r, st.view);
    }
    Ok((views, forecasts))
}

#[derive(Debug, Clone)]
pub struct DemoRun {
    pub kind: DemoKind,
    pub manifest: RunManifest,
    pub work_dir: PathBuf,
    pub submit: SubmitOutcome,
    pub result: Option<RunOutcome>,
    pub oracle: RunOutcome,
    /// Stored result serializes to exactly the same bytes as the oracle's.
    pub bitwise_equal: bool,
    /// Unweighted insecurity over every raw scenario (DSA only).
    pub brute_force: Option<f64>,
    pub ue_reports: Vec<UeReport>,
    pub report: Report,
}

impl DemoRun {
    pub fn exit_code(&self) -> i32 {
        match (&self.submit, self.bitwise_equal) {
            (SubmitOutcome::Completed(_), true) => 0,
            (SubmitOutcome::Completed(_), false) => 2,
            (failed, _) => failed.exit_code(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = self.report.summary();
        s.push_str(&format!(
            "distributed result matches the single-process reference bit for bit: {}\n",
            if self.bitwise_equal { "yes" } else { "NO" }
        ));
        if let (Some(bf), Some(r)) = (self.brute_force, &self.result) {
            s.push_str(&format!(
                "brute-force insecurity over all {} raw scenarios: {bf:.4} (reduced estimate {:.4}, difference {:.4})\n",
                self.manifest.dsa.map_or(0, |d| d.n_raw),
                r.summary.insecurity_probability,
                (r.summary.insecurity_probability - bf).abs()
            ));
        }
        s.push_str(&format!("work dir: {}\n", self.work_dir.display()));
        s
    }
}

pub struct DemoOptions {
    pub kind: DemoKind,
    pub config: Config,
    /// The `edgegrid` binary for live mode; defaults to the running executable.
    pub binary: Option<PathBuf>,
}

fn default_model(cfg: &Config) -> Result<ErrorModel, NodeError> {
    Ok(ErrorModel::gaussian(cfg.f64("dsa.sigma")?))
}

fn prepare_dir(cfg: &mut Config) -> Result<(PathBuf, Option<tempfile::TempDir>), DemoError> {
    let (dir, guard) = match cfg.opt_path("demo.work_dir") {
        Some(d) => (d, None),
        None => {
            let t = tempfile::Builder::new()
                .prefix("edgegrid-demo-")
                .tempdir()
                .map_err(|e| DemoError::Setup(e.to_string()))?;
            (t.path().to_path_buf(), Some(t))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| DemoError::Setup(format!("{}: {e}", dir.display())))?;
    let store = dir.join("store");
    let logs = dir.join("logs");
    if logs.exists()
        && std::fs::read_dir(&logs)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false)
    {
        return Err(DemoError::Setup(format!(
            "{} already holds logs from an earlier demo; pick an empty work dir",
            dir.display()
        )));
    }
    cfg.set("store.root", store.display().to_string(), Source::Flag)
        .map_err(NodeError::from)?;
    cfg.set("log.dir", logs.display().to_string(), Source::Flag)
        .map_err(NodeError::from)?;
    Ok((dir, guard))
}

pub fn run_demo(opts: DemoOptions) -> Result<DemoRun, DemoError> {
    let mut cfg = demo_config(opts.kind, &opts.config)?;
    let (dir, guard) = prepare_dir(&mut cfg)?;
    // keep the directory for inspection
    if let Some(g) = guard {
        let _ = g.keep();
    }
    let base = cfg.load_case().map_err(NodeError::from)?;
    let manifest = cfg.manifest(&base).map_err(NodeError::from)?;
    let scripts = demo_scripts(opts.kind, &base);
    let (submit, ue_reports) = if cfg.bool("demo.virtual_time").map_err(NodeError::from)? {
        run_virtual(&cfg, &base, &manifest, &scripts)?
    } else {
        let bin = match opts.binary {
            Some(b) => b,
            None => std::env::current_exe().map_err(|e| DemoError::Setup(e.to_string()))?,
        };
        (run_live(&cfg, &bin, &dir, &manifest, &scripts)?, Vec::new())
    };
    finish(opts.kind, &cfg, &base, manifest, dir, submit, ue_reports, &scripts)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    kind: DemoKind,
    cfg: &Config,
    base: &GridCase,
    manifest: RunManifest,
    dir: PathBuf,
    submit: SubmitOutcome,
    ue_reports: Vec<UeReport>,
    scripts: &BTreeMap<RegionId, Vec<ScriptEntry>>,
) -> Result<DemoRun, DemoError> {
    let store = FsStore::open(cfg.string("store.root")).map_err(NodeError::from)?;
    let result = store
        .get(&StoreKey::artifact(manifest.run_id, "cloud", Artifact::Result))
        .ok()
        .and_then(|b| from_payload::<RunOutcome>(&b).ok());
    let (views, forecasts) = oracle_inputs(base, scripts, default_model(cfg)?).map_err(DemoError::Setup)?;
    let oracle = monolithic(base, &views, &manifest, &forecasts).map_err(NodeError::from)?;
    let bitwise_equal = result.as_ref().is_some_and(|r| to_payload(r) == to_payload(&oracle));
    let brute_force = match manifest.mode {
        RunMode::Dsa => Some(brute_force_probability(base, &views, &manifest, &forecasts).map_err(NodeError::from)?),
        RunMode::Topology => None,
    };
    let log_dir = cfg.opt_path("log.dir").expect("demo sets a log dir");
    let report = build_report(manifest.run_id, &log_dir, Some(&store))?;
    let _ = std::fs::write(dir.join("report.csv"), report.to_csv());
    Ok(DemoRun {
        kind,
        manifest,
        work_dir: dir,
        submit,
        result,
        oracle,
        bitwise_equal,
        brute_force,
        ue_reports,
        report,
    })
}

fn ue_name(r: RegionId, i: usize) -> String {
    format!("ue-{r}-{i}")
}

/// Every node as a task on one paused-clock runtime.
fn run_virtual(
    cfg: &Config,
    base: &GridCase,
    manifest: &RunManifest,
    scripts: &BTreeMap<RegionId, Vec<ScriptEntry>>,
) -> Result<(SubmitOutcome, Vec<UeReport>), DemoError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .map_err(|e| DemoError::Setup(e.to_string()))?;
    rt.block_on(async {
        let regions: Vec<RegionId> = manifest.expected_regions.iter().copied().collect();
        let cluster = Cluster::start(cfg, base, &regions).await?;
        let mut ues = Vec::new();
        for &r in &regions {
            for i in 1..=cfg.usize("demo.ues_per_region")? {
                let script = scripts.get(&r).cloned().unwrap_or_default();
                ues.push(cluster.ue(ue_name(r, i), r, script));
            }
        }
        let mut reports = Vec::new();
        // all agents run concurrently on the one thread
        for r in futures::future::join_all(ues).await {
            reports.push(r?);
        }
        let outcome = cluster.submit(manifest).await?;
        cluster.settle(manifest.run_id).await;
        cluster.shutdown();
        Ok::<_, NodeError>((outcome, reports))
    })
    .map_err(DemoError::from)
}

struct Children(Vec<Child>);

impl Drop for Children {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Starts a long-running node and reads the address it prints on stdout.
fn spawn_server(bin: &Path, args: &[String], children: &mut Children) -> Result<String, DemoError> {
    let mut child = Command::new(bin)
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| DemoError::Setup(format!("starting {}: {e}", bin.display())))?;
    let stdout = child.stdout.take().expect("piped stdout");
    children.0.push(child);
    let mut line = String::new();
    BufReader::new(stdout)
        .read_line(&mut line)
        .map_err(|e| DemoError::Setup(e.to_string()))?;
    line.trim()
        .strip_prefix("listening ")
        .map(str::to_string)
        .ok_or_else(|| DemoError::Setup(format!("node {args:?} did not report its address (got {line:?})")))
}

fn log_has(dir: &Path, node: &str, needle: &str) -> bool {
    std::fs::read_to_string(dir.join(format!("{node}.log")))
        .map(|t| t.lines().any(|l| l.contains(needle)))
        .unwrap_or(false)
}

fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    f()
}

/// Every node as its own process on loopback TCP.
fn run_live(
    cfg: &Config,
    bin: &Path,
    dir: &Path,
    manifest: &RunManifest,
    scripts: &BTreeMap<RegionId, Vec<ScriptEntry>>,
) -> Result<SubmitOutcome, DemoError> {
    let conf = dir.join("node.conf");
    std::fs::write(&conf, cfg.to_text()).map_err(|e| DemoError::Setup(e.to_string()))?;
    let log_dir = cfg.opt_path("log.dir").expect("demo sets a log dir");
    let common = |node: String| {
        vec![
            "--config".into(),
            conf.display().to_string(),
            "--set".into(),
            format!("node.id={node}"),
        ]
    };
    let mut children = Children(Vec::new());

    let mut args = common("cloud".into());
    args.extend(["--listen".into(), "127.0.0.1:0".into(), "cloud".into()]);
    let cloud_addr = spawn_server(bin, &args, &mut children)?;

    let mut edge_addrs = BTreeMap::new();
    for &r in &manifest.expected_regions {
        let mut args = common(format!("edge-{r}"));
        args.extend([
            "--region".into(),
            r.to_string(),
            "--cloud-addr".into(),
            cloud_addr.clone(),
            "--listen".into(),
            "127.0.0.1:0".into(),
            "edge".into(),
        ]);
        edge_addrs.insert(r, spawn_server(bin, &args, &mut children)?);
    }

    let mut ues = Vec::new();
    for (&r, addr) in &edge_addrs {
        let script = dir.join(format!("ue-script-{r}.json"));
        let text = serde_json::to_string_pretty(scripts.get(&r).map(Vec::as_slice).unwrap_or(&[]))
            .map_err(|e| DemoError::Setup(e.to_string()))?;
        std::fs::write(&script, text).map_err(|e| DemoError::Setup(e.to_string()))?;
        for i in 1..=cfg.usize("demo.ues_per_region").map_err(NodeError::from)? {
            let mut args = common(ue_name(r, i));
            args.extend([
                "--region".into(),
                r.to_string(),
                "--set".into(),
                format!("net.edge_addr={addr}"),
                "--set".into(),
                format!("ue.script={}", script.display()),
                "ue".into(),
            ]);
            ues.push(
                Command::new(bin)
                    .args(&args)
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .spawn()
                    .map_err(|e| DemoError::Setup(e.to_string()))?,
            );
        }
    }
    for mut u in ues {
        let status = u.wait().map_err(|e| DemoError::Setup(e.to_string()))?;
        if !status.success() {
            return Err(DemoError::Setup(format!("a UE agent exited with {status}")));
        }
    }

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| DemoError::Setup(e.to_string()))?;
    let outcome = rt.block_on(async {
        let env = NodeEnv::from_config(cfg, "controller", Net::Tcp, Clock::Wall, ComputeMode::Worker, false)?;
        submit(manifest, &cloud_addr, &env).await
    })?;
    let run = format!("result_recv run={}", manifest.run_id);
    let aborted = format!("run={}", manifest.run_id);
    if matches!(outcome, SubmitOutcome::Completed(_)) {
        wait_until(Duration::from_secs(10), || {
            edge_addrs.keys().all(|r| log_has(&log_dir, &format!("edge-{r}"), &run))
        });
    } else {
        wait_until(Duration::from_secs(2), || {
            edge_addrs
                .keys()
                .all(|r| log_has(&log_dir, &format!("edge-{r}"), &format!("cloud_error {aborted}")))
        });
    }
    drop(children);
    Ok(outcome)
}
