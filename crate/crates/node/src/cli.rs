//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure or unknown run, 3 barrier timeout.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use edgegrid_core::grid::build_ybus;
use edgegrid_core::pipeline::simulate_case;
use edgegrid_core::sampling::{draw_samples, reduce_scenarios, ForecastSpec, LoadForecast};
use edgegrid_transport::store::FsStore;
use edgegrid_transport::wire::RunId;

use crate::cloud::{start_cloud, CloudConfig};
use crate::config::{Config, Source};
use crate::controller::submit;
use crate::demo::{run_demo, DemoKind, DemoOptions};
use crate::edge::{code_name, join, start_edge, EdgeConfig};
use crate::env::{ComputeMode, NodeEnv};
use crate::logging::Clock;
use crate::netio::Net;
use crate::report::build_report;
use crate::ue::{parse_script, run_ue, UeConfig};
use crate::NodeError;

#[derive(Debug, Parser)]
#[command(
    name = "edgegrid",
    version,
    about = "Distributed transient stability assessment over emulated 5G links"
)]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Link profile file; may only set `link.*` keys.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub store_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    #[arg(long, global = true)]
    pub cloud_addr: Option<String>,
    #[arg(long, global = true)]
    pub region: Option<u32>,
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    #[arg(long, global = true)]
    pub deadline_s: Option<f64>,
    #[arg(long, global = true)]
    pub virtual_time: bool,
    #[arg(long, global = true)]
    pub log_dir: Option<PathBuf>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DemoArg {
    Topology,
    Dsa,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a UE agent that replays `ue.script` to its edge.
    Ue,
    /// Run an edge server for `node.region`.
    Edge,
    /// Run the cloud coordinator.
    Cloud,
    /// Open a run at the cloud and wait for its result.
    Submit,
    /// Start a cloud, edges and UEs and carry one run end to end.
    Demo { kind: DemoArg },
    /// Print the bus admittance matrix of a case as CSV.
    Ybus {
        #[arg(value_name = "CASE")]
        case_file: Option<PathBuf>,
    },
    /// Simulate one fault on a case; fault keys as `bus=7 branch=4 t_clear=0.2`.
    Simulate {
        #[arg(value_name = "CASE")]
        case_file: Option<PathBuf>,
        fault: Vec<String>,
        /// Write the trajectory CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw and reduce load scenarios for a forecast spec (JSON list of
    /// `{bus, model}`); prints the reduced set as JSON.
    Sample {
        spec: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Stage timings of a finished run: CSV to stdout, summary to stderr.
    Report {
        run_id: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

fn usage(msg: impl ToString) -> Failure {
    Failure {
        code: 1,
        msg: msg.to_string(),
    }
}

fn runtime(msg: impl ToString) -> Failure {
    Failure {
        code: 2,
        msg: msg.to_string(),
    }
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Config(_) => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<crate::config::ConfigError> for Failure {
    fn from(e: crate::config::ConfigError) -> Self {
        usage(e)
    }
}

/// Layers defaults, file, profile and flags.
pub fn build_config(cli: &Cli) -> Result<Config, crate::config::ConfigError> {
    let mut cfg = Config::default();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    if let Some(p) = &cli.profile {
        cfg.load_profile(p)?;
    }
    let mut flag = |k: &str, v: Option<String>| match v {
        Some(v) => cfg.set(k, v, Source::Flag),
        None => Ok(()),
    };
    flag("run.seed", cli.seed.map(|v| v.to_string()))?;
    flag("store.root", cli.store_root.as_ref().map(|p| p.display().to_string()))?;
    flag("net.listen", cli.listen.clone())?;
    flag("net.cloud_addr", cli.cloud_addr.clone())?;
    flag("node.region", cli.region.map(|v| v.to_string()))?;
    flag("case.path", cli.case.as_ref().map(|p| p.display().to_string()))?;
    flag("run.deadline_s", cli.deadline_s.map(|v| v.to_string()))?;
    flag("log.dir", cli.log_dir.as_ref().map(|p| p.display().to_string()))?;
    if cli.virtual_time {
        flag("demo.virtual_time", Some("true".into()))?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| crate::config::ConfigError::Syntax {
            origin: "--set".into(),
            line: 0,
            msg: format!("expected key=value, got `{kv}`"),
        })?;
        cfg.set(k.trim(), v.trim(), Source::Flag)?;
    }
    Ok(cfg)
}

/// Bulk output; a reader that hangs up early (`| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn node_id(cfg: &Config, fallback: String) -> String {
    let id = cfg.string("node.id");
    if id.is_empty() {
        fallback
    } else {
        id
    }
}

fn rt() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)
}

fn announce(addr: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "listening {addr}");
    let _ = out.flush();
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("edgegrid: {}", f.msg);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, Failure> {
    let cfg = build_config(&cli)?;
    match cli.command {
        Cmd::Ue => {
            let region = cfg.u32("node.region")?;
            let id = node_id(&cfg, format!("ue-{region}"));
            let script = match cfg.opt_path("ue.script") {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    parse_script(&text).map_err(usage)?
                }
                None => Vec::new(),
            };
            let ue = UeConfig {
                id: id.clone(),
                region,
                edge_addr: cfg.string("net.edge_addr"),
                script,
                ack_timeout: Duration::from_secs_f64(cfg.f64("ue.ack_timeout_s")?),
            };
            let report = rt()?.block_on(async {
                let env = NodeEnv::from_config(&cfg, &id, Net::Tcp, Clock::Wall, ComputeMode::Worker, true)?;
                Ok::<_, NodeError>(run_ue(ue, env).await)
            })?;
            if let Some(e) = report.error {
                return Err(runtime(e));
            }
            println!(
                "delivered {} failed {} rejected {}",
                report.delivered.len(),
                report.failed.len(),
                report.rejected.len()
            );
            Ok(if report.failed.is_empty() && report.rejected.is_empty() {
                0
            } else {
                2
            })
        }
        Cmd::Edge => {
            let region = cfg.u32("node.region")?;
            let base = cfg.load_case()?;
            if !base.regions().contains(&region) {
                return Err(usage(format!("the case has no region {region}")));
            }
            let id = node_id(&cfg, format!("edge-{region}"));
            let ecfg = EdgeConfig {
                region,
                base,
                listen: cfg.string("net.listen"),
                cloud_addr: cfg.string("net.cloud_addr"),
                default_model: edgegrid_core::sampling::ErrorModel::gaussian(cfg.f64("dsa.sigma")?),
            };
            rt()?.block_on(async {
                let env = NodeEnv::from_config(&cfg, &id, Net::Tcp, Clock::Wall, ComputeMode::Worker, true)?;
                let h = start_edge(ecfg, env).await?;
                announce(&h.addr);
                let _ = h.task.await;
                Ok::<_, NodeError>(())
            })?;
            Ok(0)
        }
        Cmd::Cloud => {
            let base = cfg.load_case()?;
            let id = node_id(&cfg, "cloud".into());
            let ccfg = CloudConfig {
                base,
                listen: cfg.string("net.listen"),
            };
            rt()?.block_on(async {
                let env = NodeEnv::from_config(&cfg, &id, Net::Tcp, Clock::Wall, ComputeMode::Worker, true)?;
                let h = start_cloud(ccfg, env).await?;
                announce(&h.addr);
                let _ = h.task.await;
                Ok::<_, NodeError>(())
            })?;
            Ok(0)
        }
        Cmd::Submit => {
            let base = cfg.load_case()?;
            let manifest = cfg.manifest(&base)?;
            manifest.validate().map_err(usage)?;
            let id = node_id(&cfg, "controller".into());
            let outcome = rt()?.block_on(async {
                let env = NodeEnv::from_config(&cfg, &id, Net::Tcp, Clock::Wall, ComputeMode::Worker, true)?;
                submit(&manifest, &cfg.string("net.cloud_addr"), &env).await
            })?;
            match &outcome {
                crate::controller::SubmitOutcome::Completed(r) => {
                    println!("run {} completed; result at {}", manifest.run_id, r.store_key);
                    println!("{}", serde_json::to_string(&r.summary).unwrap_or_default());
                }
                crate::controller::SubmitOutcome::Failed(e) => {
                    eprintln!("run {} failed ({}): {}", manifest.run_id, code_name(e.code), e.text);
                    if !e.regions.is_empty() {
                        eprintln!("regions: {}", join(&e.regions));
                    }
                }
            }
            Ok(outcome.exit_code())
        }
        Cmd::Demo { kind } => {
            let kind = match kind {
                DemoArg::Topology => DemoKind::Topology,
                DemoArg::Dsa => DemoKind::Dsa,
            };
            let run = run_demo(DemoOptions {
                kind,
                config: cfg,
                binary: None,
            })
            .map_err(|e| match e {
                crate::demo::DemoError::Node(n) => Failure::from(n),
                other => runtime(other),
            })?;
            print!("{}", run.summary());
            Ok(run.exit_code())
        }
        Cmd::Ybus { case_file } => {
            let mut cfg = cfg;
            if let Some(p) = case_file {
                cfg.set("case.path", p.display().to_string(), Source::Flag)?;
            }
            let case = cfg.load_case()?;
            let y = build_ybus(&case).map_err(runtime)?;
            let mut out = String::from("row_bus,col_bus,g,b\n");
            for (i, bi) in case.buses.iter().enumerate() {
                for (j, bj) in case.buses.iter().enumerate() {
                    let v = y.get(i, j);
                    if v.re != 0.0 || v.im != 0.0 {
                        out.push_str(&format!("{},{},{:e},{:e}\n", bi.id, bj.id, v.re, v.im));
                    }
                }
            }
            emit(&out);
            Ok(0)
        }
        Cmd::Simulate {
            case_file,
            mut fault,
            out,
        } => {
            let mut cfg = cfg;
            match case_file {
                // the case path is optional, so a lone fault setting lands here
                Some(p) if p.to_string_lossy().contains('=') => fault.insert(0, p.to_string_lossy().into_owned()),
                Some(p) => cfg.set("case.path", p.display().to_string(), Source::Flag)?,
                None => {}
            }
            for kv in &fault {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| usage(format!("fault settings are key=value, got `{kv}`")))?;
                let key = if k.contains('.') {
                    k.to_string()
                } else {
                    format!("fault.{k}")
                };
                cfg.set(&key, v, Source::Flag)?;
            }
            let case = cfg.load_case()?;
            let res = simulate_case(&case, &cfg.fault()?, &cfg.sim_config(case.freq_hz)?).map_err(runtime)?;
            let csv = res.to_csv();
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
                None => emit(&csv),
            }
            eprintln!("verdict: {:?}", res.verdict);
            Ok(0)
        }
        Cmd::Sample { spec, n, k } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
            let loads: Vec<LoadForecast> = serde_json::from_str(&text).map_err(usage)?;
            let spec = ForecastSpec::new(loads).map_err(usage)?;
            let n = n.unwrap_or(cfg.usize("dsa.n_raw")?);
            let k = k.unwrap_or(cfg.usize("dsa.k")?);
            let seed = cfg.u64("run.seed")?;
            let samples = draw_samples(&spec, n, seed).map_err(usage)?;
            let set = reduce_scenarios(&samples, k.min(n), seed).map_err(usage)?;
            emit(&(serde_json::to_string_pretty(&set).map_err(runtime)? + "\n"));
            Ok(0)
        }
        Cmd::Report { run_id, out } => {
            let run: RunId = run_id
                .parse()
                .map_err(|_| usage(format!("`{run_id}` is not a run id")))?;
            // without a log dir only the store can vouch for the run
            let log_dir = cfg.opt_path("log.dir").unwrap_or_default();
            let root = cfg.string("store.root");
            let store = Path::new(&root).is_dir().then(|| FsStore::open(&root).ok()).flatten();
            let rep = build_report(run, &log_dir, store.as_ref()).map_err(runtime)?;
            match out {
                Some(p) => std::fs::write(&p, rep.to_csv()).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
                None => emit(&rep.to_csv()),
            }
            eprint!("{}", rep.summary());
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_files() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("a.conf");
        std::fs::write(&conf, "run.seed = 5\nnode.region = 2\n").unwrap();
        let cli = Cli::try_parse_from([
            "edgegrid",
            "--config",
            conf.to_str().unwrap(),
            "--seed",
            "9",
            "--set",
            "dsa.k=4",
            "ue",
        ])
        .unwrap();
        let cfg = build_config(&cli).unwrap();
        assert_eq!(cfg.raw("run.seed"), "9");
        assert_eq!(cfg.source("run.seed"), Source::Flag);
        assert_eq!(cfg.raw("node.region"), "2");
        assert_eq!(cfg.source("node.region"), Source::File);
        assert_eq!(cfg.raw("dsa.k"), "4");
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_cli(["edgegrid", "frobnicate"]), 1);
        assert_eq!(run_cli(["edgegrid", "--set", "nope=1", "ybus"]), 1);
        assert_eq!(run_cli(["edgegrid", "report", "not-a-run"]), 1);
    }
}
