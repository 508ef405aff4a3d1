//! Cloud coordinator. One event loop owns all run state; connection readers,
//! barrier waits and compute jobs feed it through a channel.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use edgegrid_core::grid::{GridCase, RegionId};
use edgegrid_core::sampling::ScenarioSet;
use edgegrid_transport::link::Direction;
use edgegrid_transport::messages::{
    Ack, ErrorCode, ErrorMsg, Message, Role, RunClose, RunManifest, RunMode, RunResult, UploadReady,
};
use edgegrid_transport::store::{content_hash, Artifact, FsStore, StoreKey, WaitOutcome};
use edgegrid_transport::wire::{from_payload, to_payload, RunId};
use tokio::sync::mpsc;
use tokio::task::{JoinHandle, JoinSet};

use crate::compute::{cloud_compute, RegionUpload, RunOutcome};
use crate::edge::{code_name, join, mode_name, panic_text};
use crate::env::{ComputeMode, NodeEnv};
use crate::netio::{BoxRead, BoxWrite, Incoming, MsgReader, MsgSender};
use crate::NodeError;

#[derive(Debug, Clone)]
pub struct CloudConfig {
    pub base: GridCase,
    pub listen: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Waiting,
    Computing,
    Done,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub manifest: RunManifest,
    pub phase: Phase,
    pub accepted: BTreeMap<(RegionId, Artifact), UploadReady>,
    pub duplicates_rejected: usize,
    pub missing: Vec<RegionId>,
    pub summary: Option<edgegrid_transport::messages::ResultSummary>,
    controller: Option<u64>,
}

/// Read-only view of the coordinator, for tests and the harness.
#[derive(Debug, Clone, Default)]
pub struct CloudView {
    pub runs: BTreeMap<RunId, RunState>,
    pub edges: BTreeMap<RegionId, usize>,
}

pub struct CloudHandle {
    pub addr: String,
    pub view: Arc<Mutex<CloudView>>,
    pub task: JoinHandle<()>,
}

impl CloudHandle {
    pub fn snapshot(&self) -> CloudView {
        self.view.lock().expect("cloud view").clone()
    }
}

enum Event {
    Connected(u64, MsgSender),
    Msg(u64, RunId, Message),
    Malformed(u64, RunId, String),
    Closed(u64),
    Barrier(RunId, WaitOutcome),
    Computed(RunId, Result<(StoreKey, RunOutcome), String>),
}

struct Conn {
    tx: MsgSender,
    role: Option<Role>,
    region: Option<RegionId>,
    node: String,
}

pub async fn start_cloud(cfg: CloudConfig, env: NodeEnv) -> Result<CloudHandle, NodeError> {
    let mut listener = env
        .net
        .listen(&cfg.listen)
        .await
        .map_err(|e| NodeError::Listen(cfg.listen.clone(), e))?;
    let addr = listener.local_addr();
    env.log.event("cloud_listening", &[("addr", &addr)]);
    let view = Arc::new(Mutex::new(CloudView::default()));
    let (ev_tx, ev_rx) = mpsc::unbounded_channel();

    let accept_env = env.clone();
    let accept_tx = ev_tx.clone();
    let acceptor_fut = async move {
        // connection readers die with the acceptor
        let mut readers = JoinSet::new();
        let mut next_id = 0u64;
        loop {
            let (r, w) = match listener.accept().await {
                Ok(c) => c,
                Err(e) => {
                    accept_env.log.event("accept_failed", &[("error", &e)]);
                    break;
                }
            };
            next_id += 1;
            readers.spawn(conn_reader(next_id, r, w, accept_env.clone(), accept_tx.clone()));
            while readers.try_join_next().is_some() {}
        }
    };

    let mut core = Core {
        cfg,
        env,
        conns: BTreeMap::new(),
        runs: BTreeMap::new(),
        view: view.clone(),
        events: ev_tx,
    };
    let task = tokio::spawn(async move {
        let mut acceptor = JoinSet::new();
        acceptor.spawn(acceptor_fut);
        core.run(ev_rx).await;
    });
    Ok(CloudHandle { addr, view, task })
}

async fn conn_reader(id: u64, r: BoxRead, w: BoxWrite, env: NodeEnv, events: mpsc::UnboundedSender<Event>) {
    let mut rx = MsgReader::new(r);
    let mut w = Some(w);
    loop {
        let ev = match rx.recv().await {
            Ok(Some(Incoming::Msg(run, msg))) => {
                if let Some(w) = w.take() {
                    // the peer name is only known from its Hello
                    let peer = match &msg {
                        Message::Hello(h) => h.node_id.clone(),
                        _ => format!("conn-{id}"),
                    };
                    let dir = match &msg {
                        Message::Hello(h) if h.role == Role::Controller => None,
                        _ => Some(Direction::Down),
                    };
                    let sender = match dir {
                        Some(d) => env.sender(w, &peer, d),
                        None => MsgSender::new(
                            w,
                            edgegrid_transport::link::LinkProfile::zero_impairment(),
                            Direction::Down,
                            env.link_clock,
                        ),
                    };
                    match sender {
                        Ok(s) => {
                            if events.send(Event::Connected(id, s)).is_err() {
                                return;
                            }
                        }
                        Err(_) => break,
                    }
                }
                Event::Msg(id, run, msg)
            }
            Ok(Some(Incoming::Malformed(run, text))) => Event::Malformed(id, run, text),
            Ok(None) => break,
            Err(e) => {
                env.log.event("conn_error", &[("conn", &id), ("error", &e)]);
                break;
            }
        };
        if events.send(ev).is_err() {
            return;
        }
    }
    let _ = events.send(Event::Closed(id));
}

struct Core {
    cfg: CloudConfig,
    env: NodeEnv,
    conns: BTreeMap<u64, Conn>,
    runs: BTreeMap<RunId, RunState>,
    view: Arc<Mutex<CloudView>>,
    events: mpsc::UnboundedSender<Event>,
}

fn required_keys(m: &RunManifest) -> Vec<StoreKey> {
    let mut keys = Vec::new();
    for &r in &m.expected_regions {
        keys.push(StoreKey::artifact(m.run_id, r, Artifact::PartialY));
        if m.mode == RunMode::Dsa {
            keys.push(StoreKey::artifact(m.run_id, r, Artifact::Scenarios));
        }
    }
    keys
}

/// Region of a canonical `runs/<run>/regions/<region>/<artifact>` key.
fn key_region(k: &StoreKey) -> Option<RegionId> {
    k.as_str().split('/').nth(3)?.parse().ok()
}

/// Loads every region's uploads, checks them against the announced digests,
/// runs the merge and simulation, and stores the outcome.
pub fn compute_run(
    store: &FsStore,
    base: &GridCase,
    manifest: &RunManifest,
    announced: &BTreeMap<(RegionId, Artifact), UploadReady>,
    parallel: bool,
) -> Result<(StoreKey, RunOutcome), String> {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        compute_run_inner(store, base, manifest, announced, parallel)
    }))
    .unwrap_or_else(|p| Err(format!("cloud computation panicked: {}", panic_text(&p))))
}

fn compute_run_inner(
    store: &FsStore,
    base: &GridCase,
    manifest: &RunManifest,
    announced: &BTreeMap<(RegionId, Artifact), UploadReady>,
    parallel: bool,
) -> Result<(StoreKey, RunOutcome), String> {
    let fetch = |r: RegionId, art: Artifact| -> Result<Vec<u8>, String> {
        let key = StoreKey::artifact(manifest.run_id, r, art);
        let blob = store.get(&key).map_err(|e| e.to_string())?;
        if let Some(up) = announced.get(&(r, art)) {
            if up.sha256 != content_hash(&blob) {
                return Err(format!("{key}: content does not match the announced digest"));
            }
        }
        Ok(blob)
    };
    let mut uploads = Vec::new();
    let mut sets = Vec::new();
    for &r in &manifest.expected_regions {
        let up: RegionUpload = from_payload(&fetch(r, Artifact::PartialY)?).map_err(|e| format!("region {r}: {e}"))?;
        if up.region != r {
            return Err(format!("upload under region {r} claims region {}", up.region));
        }
        uploads.push(up);
        if manifest.mode == RunMode::Dsa {
            let set: ScenarioSet =
                from_payload(&fetch(r, Artifact::Scenarios)?).map_err(|e| format!("region {r}: {e}"))?;
            sets.push(set);
        }
    }
    let outcome = cloud_compute(base, manifest, &uploads, &sets, parallel).map_err(|e| e.to_string())?;
    let key = StoreKey::artifact(manifest.run_id, "cloud", Artifact::Result);
    store.put(&key, &to_payload(&outcome)).map_err(|e| e.to_string())?;
    Ok((key, outcome))
}

impl Core {
    async fn run(&mut self, mut rx: mpsc::UnboundedReceiver<Event>) {
        while let Some(ev) = rx.recv().await {
            match ev {
                Event::Connected(id, tx) => {
                    self.conns.insert(
                        id,
                        Conn {
                            tx,
                            role: None,
                            region: None,
                            node: format!("conn-{id}"),
                        },
                    );
                }
                Event::Msg(id, run, msg) => self.on_msg(id, run, msg),
                Event::Malformed(id, run, text) => {
                    self.env
                        .log
                        .event("malformed", &[("conn", &id), ("run", &run), ("text", &text)]);
                    self.send(
                        id,
                        run,
                        Message::ErrorMsg(ErrorMsg {
                            code: ErrorCode::Protocol,
                            text,
                            regions: vec![],
                        }),
                    );
                }
                Event::Closed(id) => {
                    if let Some(c) = self.conns.remove(&id) {
                        self.env.log.event("peer_disconnected", &[("peer", &c.node)]);
                    }
                }
                Event::Barrier(run, outcome) => self.on_barrier(run, outcome),
                Event::Computed(run, res) => self.on_computed(run, res),
            }
            self.publish();
        }
    }

    fn publish(&self) {
        let mut edges = BTreeMap::new();
        for c in self.conns.values() {
            if let (Some(Role::Edge), Some(r)) = (c.role, c.region) {
                *edges.entry(r).or_insert(0) += 1;
            }
        }
        let mut v = self.view.lock().expect("cloud view");
        v.runs = self.runs.clone();
        v.edges = edges;
    }

    fn send(&self, conn: u64, run: RunId, msg: Message) {
        if let Some(c) = self.conns.get(&conn) {
            let _ = c.tx.send(run, &msg);
        }
    }

    fn edge_conns(&self, regions: &BTreeSet<RegionId>) -> Vec<u64> {
        self.conns
            .iter()
            .filter(|(_, c)| c.role == Some(Role::Edge) && c.region.is_some_and(|r| regions.contains(&r)))
            .map(|(id, _)| *id)
            .collect()
    }

    /// To the submitting controller and every edge of the run's regions.
    fn broadcast(&self, run: RunId, msg: Message) {
        let Some(st) = self.runs.get(&run) else { return };
        let mut targets = self.edge_conns(&st.manifest.expected_regions);
        targets.extend(st.controller);
        for id in targets {
            self.send(id, run, msg.clone());
        }
    }

    fn error(&self, conn: u64, run: RunId, code: ErrorCode, text: String, regions: Vec<RegionId>) {
        self.send(conn, run, Message::ErrorMsg(ErrorMsg { code, text, regions }));
    }

    fn on_msg(&mut self, id: u64, run: RunId, msg: Message) {
        let log = self.env.log.clone();
        match msg {
            Message::Hello(h) => {
                let Some(c) = self.conns.get_mut(&id) else { return };
                c.role = Some(h.role);
                c.region = h.region;
                c.node = h.node_id.clone();
                let region = h.region.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
                log.event(
                    "peer_hello",
                    &[
                        ("peer", &h.node_id),
                        ("role", &format!("{:?}", h.role)),
                        ("region", &region),
                    ],
                );
                if h.role == Role::Edge {
                    // late joiners still get every run that is waiting on them
                    let pending: Vec<RunManifest> = self
                        .runs
                        .values()
                        .filter(|st| {
                            st.phase == Phase::Waiting
                                && h.region.is_some_and(|r| st.manifest.expected_regions.contains(&r))
                        })
                        .map(|st| st.manifest.clone())
                        .collect();
                    for m in pending {
                        self.send(id, m.run_id, Message::RunOpen(m));
                    }
                }
            }
            Message::RunOpen(manifest) => self.on_run_open(id, manifest),
            Message::PartialReady(up) => self.on_upload(id, run, Artifact::PartialY, up),
            Message::ScenarioReady(up) => self.on_upload(id, run, Artifact::Scenarios, up),
            Message::ErrorMsg(e) => {
                let from = self.conns.get(&id).map(|c| c.node.clone()).unwrap_or_default();
                log.event(
                    "peer_error",
                    &[
                        ("run", &run),
                        ("peer", &from),
                        ("code", &code_name(e.code)),
                        ("text", &e.text),
                    ],
                );
                // an edge that cannot compute dooms the run; tell the submitter
                if e.code == ErrorCode::ComputeFailed {
                    if let Some(ctl) = self.runs.get(&run).and_then(|st| st.controller) {
                        self.send(ctl, run, Message::ErrorMsg(e));
                    }
                }
            }
            Message::RunClose(c) => {
                log.event("run_closed", &[("run", &c.run_id)]);
                if self.runs.contains_key(&c.run_id) {
                    let regions = self.runs[&c.run_id].manifest.expected_regions.clone();
                    for e in self.edge_conns(&regions) {
                        self.send(e, c.run_id, Message::RunClose(RunClose { run_id: c.run_id }));
                    }
                }
            }
            other => {
                let t = other.msg_type();
                log.event("unexpected", &[("run", &run), ("type", &format!("{t:?}"))]);
                self.error(
                    id,
                    run,
                    ErrorCode::Protocol,
                    format!("the cloud does not accept {t:?}"),
                    vec![],
                );
            }
        }
    }

    fn on_run_open(&mut self, id: u64, manifest: RunManifest) {
        let run = manifest.run_id;
        if let Err(text) = manifest.validate() {
            self.error(id, run, ErrorCode::Protocol, text, vec![]);
            return;
        }
        if self.runs.contains_key(&run) {
            self.env.log.event("duplicate_run", &[("run", &run)]);
            self.error(
                id,
                run,
                ErrorCode::DuplicateRun,
                format!("run {run} already exists"),
                vec![],
            );
            return;
        }
        let regions = join(&manifest.expected_regions.iter().copied().collect::<Vec<_>>());
        self.env.log.event(
            "run_open",
            &[
                ("run", &run),
                ("mode", &mode_name(manifest.mode)),
                ("regions", &regions),
            ],
        );
        for e in self.edge_conns(&manifest.expected_regions) {
            self.send(e, run, Message::RunOpen(manifest.clone()));
        }
        let keys = required_keys(&manifest);
        let deadline = tokio::time::Instant::now() + Duration::from_secs_f64(manifest.deadline_s);
        self.runs.insert(
            run,
            RunState {
                manifest,
                phase: Phase::Waiting,
                accepted: BTreeMap::new(),
                duplicates_rejected: 0,
                missing: vec![],
                summary: None,
                controller: Some(id),
            },
        );
        let store = self.env.store.clone();
        let events = self.events.clone();
        tokio::spawn(async move {
            let outcome = store.wait_for_async(&keys, deadline).await;
            let _ = events.send(Event::Barrier(run, outcome));
        });
    }

    fn on_upload(&mut self, id: u64, run: RunId, art: Artifact, up: UploadReady) {
        let log = self.env.log.clone();
        let conn_region = self.conns.get(&id).and_then(|c| c.region);
        let Some(st) = self.runs.get_mut(&run) else {
            self.error(id, run, ErrorCode::UnknownRun, format!("no run {run}"), vec![up.region]);
            return;
        };
        let canonical = StoreKey::artifact(run, up.region, art);
        if up.store_key != canonical || conn_region != Some(up.region) {
            let text = format!("upload {} is not the canonical {canonical} for this edge", up.store_key);
            self.error(id, run, ErrorCode::Protocol, text, vec![up.region]);
            return;
        }
        if st.accepted.contains_key(&(up.region, art)) {
            st.duplicates_rejected += 1;
            log.event(
                "duplicate_upload",
                &[("run", &run), ("region", &up.region), ("key", &up.store_key)],
            );
            let text = format!("{} was already announced; the first upload stands", up.store_key);
            self.error(id, run, ErrorCode::DuplicateUpload, text, vec![up.region]);
            return;
        }
        log.event(
            "upload_accepted",
            &[
                ("run", &run),
                ("region", &up.region),
                ("artifact", &art.as_str()),
                ("seq", &up.seq),
            ],
        );
        let seq = up.seq;
        st.accepted.insert((up.region, art), up);
        self.send(id, run, Message::Ack(Ack { of: Some(seq) }));
    }

    fn on_barrier(&mut self, run: RunId, outcome: WaitOutcome) {
        let Some(st) = self.runs.get_mut(&run) else { return };
        if st.phase != Phase::Waiting {
            return;
        }
        match outcome {
            WaitOutcome::Complete => {
                st.phase = Phase::Computing;
                self.env.log.event("barrier_done", &[("run", &run)]);
                let store = self.env.store.clone();
                let base = self.cfg.base.clone();
                let manifest = st.manifest.clone();
                let announced = st.accepted.clone();
                match self.env.compute {
                    ComputeMode::Inline => {
                        let res = compute_run(&store, &base, &manifest, &announced, false);
                        self.on_computed(run, res);
                    }
                    ComputeMode::Worker => {
                        let events = self.events.clone();
                        tokio::task::spawn_blocking(move || {
                            let res = compute_run(&store, &base, &manifest, &announced, true);
                            let _ = events.send(Event::Computed(run, res));
                        });
                    }
                }
            }
            WaitOutcome::TimedOut(keys) => {
                let missing: Vec<RegionId> = keys
                    .iter()
                    .filter_map(key_region)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                st.phase = Phase::Aborted;
                st.missing = missing.clone();
                self.env
                    .log
                    .event("run_aborted", &[("run", &run), ("missing", &join(&missing))]);
                let text = format!(
                    "barrier deadline passed without uploads from regions {}",
                    join(&missing)
                );
                self.broadcast(
                    run,
                    Message::ErrorMsg(ErrorMsg {
                        code: ErrorCode::BarrierTimeout,
                        text,
                        regions: missing,
                    }),
                );
            }
        }
    }

    fn on_computed(&mut self, run: RunId, res: Result<(StoreKey, RunOutcome), String>) {
        let Some(st) = self.runs.get_mut(&run) else { return };
        match res {
            Ok((key, outcome)) => {
                st.phase = Phase::Done;
                st.summary = Some(outcome.summary.clone());
                let verdict = outcome
                    .summary
                    .verdict
                    .map(|v| format!("{v:?}"))
                    .unwrap_or_else(|| "-".into());
                self.env.log.event(
                    "sim_done",
                    &[
                        ("run", &run),
                        ("verdict", &verdict),
                        ("p_insecure", &outcome.summary.insecurity_probability),
                        ("scenarios", &outcome.summary.n_scenarios),
                    ],
                );
                self.broadcast(
                    run,
                    Message::RunResult(RunResult {
                        store_key: key,
                        summary: outcome.summary,
                    }),
                );
            }
            Err(text) => {
                st.phase = Phase::Aborted;
                self.env.log.event("compute_failed", &[("run", &run), ("text", &text)]);
                self.broadcast(
                    run,
                    Message::ErrorMsg(ErrorMsg {
                        code: ErrorCode::MergeFailed,
                        text,
                        regions: vec![],
                    }),
                );
            }
        }
    }
}
