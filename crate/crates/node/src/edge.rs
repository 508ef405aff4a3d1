//! Edge server: keeps its region's view of the grid current from UE reports
//! and, when the cloud opens a run, uploads the region's share of the work.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use edgegrid_core::grid::{BusId, GridCase, RegionId};
use edgegrid_core::sampling::{ErrorModel, ForecastSpec};
use edgegrid_transport::link::Direction;
use edgegrid_transport::messages::{
    Ack, ErrorCode, ErrorMsg, ForecastReport, Hello, Message, Role, RunManifest, RunMode, TopologyReport, UploadReady,
};
use edgegrid_transport::store::{Artifact, StoreKey};
use edgegrid_transport::wire::{from_payload, to_payload, RunId};
use tokio::task::{JoinHandle, JoinSet};

use crate::compute::{region_forecast, region_scenarios, region_upload, RunOutcome};
use crate::env::{ComputeMode, NodeEnv};
use crate::netio::{BoxRead, BoxWrite, Incoming, MsgReader, MsgSender};
use crate::NodeError;

#[derive(Debug, Clone)]
pub struct EdgeConfig {
    pub region: RegionId,
    pub base: GridCase,
    pub listen: String,
    pub cloud_addr: String,
    /// Error model for owned load buses no UE has reported on.
    pub default_model: ErrorModel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UploadStatus {
    Computing,
    Uploaded,
    Failed(String),
}

/// The region's live state. Reports replace records wholesale, so
/// replaying one leaves the state unchanged.
#[derive(Debug, Clone)]
pub struct EdgeState {
    pub region: RegionId,
    pub view: GridCase,
    pub forecast_overrides: BTreeMap<BusId, ErrorModel>,
    pub ues: BTreeSet<String>,
    pub runs: BTreeMap<RunId, UploadStatus>,
    pub results: BTreeMap<RunId, RunOutcome>,
    pub errors: Vec<(RunId, ErrorMsg)>,
    pub reports_applied: u64,
    pub reports_rejected: u64,
}

impl EdgeState {
    pub fn new(region: RegionId, base: GridCase) -> Self {
        Self {
            region,
            view: base,
            forecast_overrides: BTreeMap::new(),
            ues: BTreeSet::new(),
            runs: BTreeMap::new(),
            results: BTreeMap::new(),
            errors: Vec::new(),
            reports_applied: 0,
            reports_rejected: 0,
        }
    }

    /// All or nothing: one record the region does not own rejects the report.
    pub fn apply_topology(&mut self, rep: &TopologyReport) -> Result<(), String> {
        let mut view = self.view.clone();
        for u in &rep.branches {
            let br = view
                .branch_mut(u.branch)
                .ok_or_else(|| format!("unknown branch {}", u.branch))?;
            if br.owner_region != self.region {
                return Err(format!("branch {} is owned by region {}", u.branch, br.owner_region));
            }
            br.status = u.status;
        }
        for u in &rep.buses {
            let idx = view.bus_index(u.bus).ok_or_else(|| format!("unknown bus {}", u.bus))?;
            let bus = &mut view.buses[idx];
            if bus.region != self.region {
                return Err(format!("bus {} is in region {}", u.bus, bus.region));
            }
            if !(u.p_load.is_finite() && u.q_load.is_finite()) {
                return Err(format!("bus {}: non-finite load", u.bus));
            }
            bus.p_load = u.p_load;
            bus.q_load = u.q_load;
        }
        self.view = view;
        Ok(())
    }

    pub fn apply_forecast(&mut self, rep: &ForecastReport) -> Result<(), String> {
        for lf in &rep.loads {
            let bus = self.view.bus(lf.bus).ok_or_else(|| format!("unknown bus {}", lf.bus))?;
            if bus.region != self.region {
                return Err(format!("bus {} is in region {}", lf.bus, bus.region));
            }
        }
        ForecastSpec::new(rep.loads.clone()).map_err(|e| e.to_string())?;
        for lf in &rep.loads {
            self.forecast_overrides.insert(lf.bus, lf.model);
        }
        Ok(())
    }
}

pub struct EdgeHandle {
    pub addr: String,
    pub state: Arc<Mutex<EdgeState>>,
    pub task: JoinHandle<()>,
}

impl EdgeHandle {
    pub fn snapshot(&self) -> EdgeState {
        self.state.lock().expect("edge state").clone()
    }
}

#[derive(Clone)]
struct Ctx {
    env: NodeEnv,
    cfg: Arc<EdgeConfig>,
    state: Arc<Mutex<EdgeState>>,
    cloud: MsgSender,
    seq: Arc<AtomicU64>,
}

/// Connects to the cloud, starts listening for UEs, and returns once both
/// are up.
pub async fn start_edge(cfg: EdgeConfig, env: NodeEnv) -> Result<EdgeHandle, NodeError> {
    let (cr, cw) = env
        .net
        .connect(&cfg.cloud_addr)
        .await
        .map_err(|e| NodeError::Connect(cfg.cloud_addr.clone(), e))?;
    let cloud = env.sender(cw, &cfg.cloud_addr, Direction::Up)?;
    let mut listener = env
        .net
        .listen(&cfg.listen)
        .await
        .map_err(|e| NodeError::Listen(cfg.listen.clone(), e))?;
    let addr = listener.local_addr();
    cloud.send(
        RunId::NIL,
        &Message::Hello(Hello {
            node_id: env.log.node().to_string(),
            role: Role::Edge,
            region: Some(cfg.region),
        }),
    )?;
    env.log
        .event("edge_listening", &[("addr", &addr), ("region", &cfg.region)]);

    let state = Arc::new(Mutex::new(EdgeState::new(cfg.region, cfg.base.clone())));
    let ctx = Ctx {
        env,
        cfg: Arc::new(cfg),
        state: state.clone(),
        cloud,
        seq: Arc::new(AtomicU64::new(0)),
    };
    let cloud_ctx = ctx.clone();
    let task = tokio::spawn(async move {
        // dropping the set, including when this task is aborted, stops them all
        let mut tasks = JoinSet::new();
        tasks.spawn(cloud_loop(cloud_ctx, cr));
        loop {
            match listener.accept().await {
                Ok((r, w)) => {
                    tasks.spawn(ue_conn(ctx.clone(), r, w));
                    while tasks.try_join_next().is_some() {}
                }
                Err(e) => {
                    ctx.env.log.event("accept_failed", &[("error", &e)]);
                    break;
                }
            }
        }
    });
    Ok(EdgeHandle { addr, state, task })
}

async fn ue_conn(ctx: Ctx, r: BoxRead, w: BoxWrite) {
    let log = &ctx.env.log;
    let mut peer = String::from("?");
    let mut tx: Option<MsgSender> = None;
    let mut rx = MsgReader::new(r);
    let mut w = Some(w);
    loop {
        let incoming = match rx.recv().await {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                log.event("ue_conn_error", &[("ue", &peer), ("error", &e)]);
                break;
            }
        };
        if tx.is_none() {
            if let Incoming::Msg(_, Message::Hello(h)) = &incoming {
                peer = h.node_id.clone();
            }
            match ctx.env.sender(w.take().expect("writer"), &peer, Direction::Down) {
                Ok(s) => tx = Some(s),
                Err(e) => {
                    log.event("ue_conn_error", &[("ue", &peer), ("error", &e)]);
                    return;
                }
            }
        }
        let tx = tx.as_ref().expect("sender");
        let reply = match incoming {
            Incoming::Msg(_, Message::Hello(h)) => {
                if h.role != Role::Ue || h.region.is_some_and(|r| r != ctx.cfg.region) {
                    Some(Err(format!("expected a UE of region {}", ctx.cfg.region)))
                } else {
                    ctx.state.lock().expect("edge state").ues.insert(h.node_id.clone());
                    log.event("ue_connected", &[("ue", &h.node_id)]);
                    None
                }
            }
            Incoming::Msg(_, Message::TopologyReport(rep)) => {
                log.event("edge_recv", &[("ue", &peer), ("seq", &rep.seq), ("kind", &"topology")]);
                let mut st = ctx.state.lock().expect("edge state");
                Some(st.apply_topology(&rep).map(|()| rep.seq))
            }
            Incoming::Msg(_, Message::ForecastReport(rep)) => {
                log.event("edge_recv", &[("ue", &peer), ("seq", &rep.seq), ("kind", &"forecast")]);
                let mut st = ctx.state.lock().expect("edge state");
                Some(st.apply_forecast(&rep).map(|()| rep.seq))
            }
            Incoming::Msg(_, other) => Some(Err(format!("unexpected {:?} from a UE", other.msg_type()))),
            Incoming::Malformed(_, text) => Some(Err(text)),
        };
        let msg = match reply {
            None => continue,
            Some(Ok(seq)) => {
                ctx.state.lock().expect("edge state").reports_applied += 1;
                log.event("report_applied", &[("ue", &peer), ("seq", &seq)]);
                Message::Ack(Ack { of: Some(seq) })
            }
            Some(Err(text)) => {
                ctx.state.lock().expect("edge state").reports_rejected += 1;
                log.event("report_rejected", &[("ue", &peer), ("text", &text)]);
                Message::ErrorMsg(ErrorMsg {
                    code: ErrorCode::MalformedReport,
                    text,
                    regions: vec![ctx.cfg.region],
                })
            }
        };
        if tx.send(RunId::NIL, &msg).is_err() {
            break;
        }
    }
    log.event("ue_disconnected", &[("ue", &peer)]);
}

async fn cloud_loop(ctx: Ctx, r: BoxRead) {
    let log = &ctx.env.log;
    let mut rx = MsgReader::new(r);
    loop {
        let (run, msg) = match rx.recv().await {
            Ok(Some(Incoming::Msg(run, msg))) => (run, msg),
            Ok(Some(Incoming::Malformed(run, text))) => {
                log.event("cloud_malformed", &[("run", &run), ("text", &text)]);
                continue;
            }
            Ok(None) => break,
            Err(e) => {
                log.event("cloud_conn_error", &[("error", &e)]);
                break;
            }
        };
        match msg {
            Message::RunOpen(manifest) => {
                let fresh = {
                    let mut st = ctx.state.lock().expect("edge state");
                    let fresh = !st.runs.contains_key(&manifest.run_id);
                    if fresh {
                        st.runs.insert(manifest.run_id, UploadStatus::Computing);
                    }
                    fresh
                };
                if !fresh {
                    log.event("duplicate_run", &[("run", &manifest.run_id)]);
                    let _ = send_cloud(
                        &ctx,
                        manifest.run_id,
                        Message::ErrorMsg(ErrorMsg {
                            code: ErrorCode::DuplicateRun,
                            text: format!("run {} was already opened at this edge", manifest.run_id),
                            regions: vec![ctx.cfg.region],
                        }),
                    );
                    continue;
                }
                log.event(
                    "run_recv",
                    &[("run", &manifest.run_id), ("mode", &mode_name(manifest.mode))],
                );
                match ctx.env.compute {
                    ComputeMode::Inline => handle_run(&ctx, &manifest),
                    ComputeMode::Worker => {
                        let c = ctx.clone();
                        tokio::task::spawn_blocking(move || handle_run(&c, &manifest));
                    }
                }
            }
            Message::RunResult(res) => {
                let outcome = ctx
                    .env
                    .store
                    .get(&res.store_key)
                    .map_err(|e| e.to_string())
                    .and_then(|b| from_payload::<RunOutcome>(&b).map_err(|e| e.to_string()));
                match outcome {
                    Ok(o) => {
                        let verdict = res
                            .summary
                            .verdict
                            .map(|v| format!("{v:?}"))
                            .unwrap_or_else(|| "-".into());
                        log.event(
                            "result_recv",
                            &[
                                ("run", &run),
                                ("verdict", &verdict),
                                ("p_insecure", &res.summary.insecurity_probability),
                            ],
                        );
                        ctx.state.lock().expect("edge state").results.insert(run, o);
                    }
                    Err(e) => {
                        log.event("result_unreadable", &[("run", &run), ("error", &e)]);
                    }
                }
            }
            Message::ErrorMsg(e) => {
                let regions = join(&e.regions);
                log.event(
                    "cloud_error",
                    &[
                        ("run", &run),
                        ("code", &code_name(e.code)),
                        ("regions", &regions),
                        ("text", &e.text),
                    ],
                );
                ctx.state.lock().expect("edge state").errors.push((run, e));
            }
            Message::Ack(a) => {
                log.event("upload_acked", &[("run", &run), ("seq", &a.of.unwrap_or(0))]);
            }
            Message::RunClose(c) => {
                log.event("run_closed", &[("run", &c.run_id)]);
            }
            other => {
                log.event(
                    "unexpected",
                    &[("run", &run), ("type", &format!("{:?}", other.msg_type()))],
                );
            }
        }
    }
    log.event("cloud_disconnected", &[]);
}

fn send_cloud(ctx: &Ctx, run: RunId, msg: Message) -> Result<(), NodeError> {
    ctx.cloud.send(run, &msg)?;
    Ok(())
}

fn handle_run(ctx: &Ctx, manifest: &RunManifest) {
    // a panic in the numerics fails this run, not the edge
    let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| compute_and_upload(ctx, manifest)))
        .unwrap_or_else(|p| Err(format!("edge computation panicked: {}", panic_text(&p))));
    let status = match &res {
        Ok(()) => UploadStatus::Uploaded,
        Err(text) => UploadStatus::Failed(text.clone()),
    };
    ctx.state
        .lock()
        .expect("edge state")
        .runs
        .insert(manifest.run_id, status);
    if let Err(text) = res {
        ctx.env
            .log
            .event("compute_failed", &[("run", &manifest.run_id), ("text", &text)]);
        let _ = send_cloud(
            ctx,
            manifest.run_id,
            Message::ErrorMsg(ErrorMsg {
                code: ErrorCode::ComputeFailed,
                text,
                regions: vec![ctx.cfg.region],
            }),
        );
    }
}

fn compute_and_upload(ctx: &Ctx, manifest: &RunManifest) -> Result<(), String> {
    let log = &ctx.env.log;
    let run = manifest.run_id;
    let region = ctx.cfg.region;
    let (view, overrides) = {
        let st = ctx.state.lock().expect("edge state");
        (st.view.clone(), st.forecast_overrides.clone())
    };
    let mut blobs = vec![(
        Artifact::PartialY,
        to_payload(&region_upload(&view, region, &manifest.fault).map_err(|e| e.to_string())?),
    )];
    if let (RunMode::Dsa, Some(params)) = (manifest.mode, manifest.dsa) {
        let spec = region_forecast(&view, region, ctx.cfg.default_model, &overrides).map_err(|e| e.to_string())?;
        let set = region_scenarios(&spec, &params).map_err(|e| e.to_string())?;
        blobs.push((Artifact::Scenarios, to_payload(&set)));
    }
    log.event("edge_compute_done", &[("run", &run), ("region", &region)]);

    let mut ready = Vec::new();
    for (art, blob) in blobs {
        let key = StoreKey::artifact(run, region, art);
        let receipt = ctx.env.store.put(&key, &blob).map_err(|e| e.to_string())?;
        ready.push((art, receipt));
    }
    let bytes: u64 = ready.iter().map(|(_, r)| r.len).sum();
    log.event(
        "store_put_done",
        &[("run", &run), ("region", &region), ("bytes", &bytes)],
    );

    for (art, receipt) in ready {
        let up = UploadReady {
            seq: ctx.seq.fetch_add(1, Ordering::Relaxed) + 1,
            region,
            store_key: receipt.key,
            sha256: receipt.sha256,
        };
        let msg = match art {
            Artifact::Scenarios => Message::ScenarioReady(up),
            _ => Message::PartialReady(up),
        };
        send_cloud(ctx, run, msg).map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

pub fn mode_name(m: RunMode) -> &'static str {
    match m {
        RunMode::Topology => "topology",
        RunMode::Dsa => "dsa",
    }
}

pub fn code_name(c: ErrorCode) -> String {
    serde_json::to_value(c)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgegrid_core::cases::case9;
    use edgegrid_core::grid::BranchStatus;
    use edgegrid_core::sampling::LoadForecast;
    use edgegrid_transport::messages::{BranchUpdate, BusLoadUpdate};

    fn owned_branch(case: &GridCase, region: RegionId) -> u32 {
        case.branches.iter().find(|b| b.owner_region == region).unwrap().id
    }

    #[test]
    fn reports_are_atomic_and_idempotent() {
        let case = case9();
        let region = case.buses[0].region;
        let mine = owned_branch(&case, region);
        let foreign = case.branches.iter().find(|b| b.owner_region != region).unwrap().id;
        let mut st = EdgeState::new(region, case.clone());

        let bad = TopologyReport {
            seq: 1,
            node_id: "ue".into(),
            branches: vec![
                BranchUpdate {
                    branch: mine,
                    status: BranchStatus::Open,
                },
                BranchUpdate {
                    branch: foreign,
                    status: BranchStatus::Open,
                },
            ],
            buses: vec![],
        };
        assert!(st.apply_topology(&bad).is_err());
        assert_eq!(st.view, case);

        let load_bus = case.buses.iter().find(|b| b.region == region).unwrap().id;
        let good = TopologyReport {
            seq: 2,
            node_id: "ue".into(),
            branches: vec![BranchUpdate {
                branch: mine,
                status: BranchStatus::Open,
            }],
            buses: vec![BusLoadUpdate {
                bus: load_bus,
                p_load: 0.7,
                q_load: 0.2,
            }],
        };
        st.apply_topology(&good).unwrap();
        let once = st.view.clone();
        st.apply_topology(&good).unwrap();
        assert_eq!(st.view, once);
        assert_eq!(st.view.branch(mine).unwrap().status, BranchStatus::Open);
    }

    #[test]
    fn forecast_for_foreign_bus_is_rejected() {
        let case = case9();
        let region = 1;
        let foreign = case
            .buses
            .iter()
            .find(|b| b.region != region && b.has_load())
            .unwrap()
            .id;
        let mut st = EdgeState::new(region, case);
        let rep = ForecastReport {
            seq: 1,
            node_id: "ue".into(),
            loads: vec![LoadForecast {
                bus: foreign,
                model: ErrorModel::gaussian(0.1),
            }],
        };
        assert!(st.apply_forecast(&rep).is_err());
        assert!(st.forecast_overrides.is_empty());
    }
}
