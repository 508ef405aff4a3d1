//! A cloud and its edges as tasks in the current runtime, over in-memory
//! pipes. Used by the virtual-time demo and by tests.

use std::collections::BTreeMap;
use std::time::Duration;

use edgegrid_core::grid::{GridCase, RegionId};
use edgegrid_core::sampling::ErrorModel;
use edgegrid_transport::messages::RunManifest;
use edgegrid_transport::wire::RunId;

use crate::cloud::{start_cloud, CloudConfig, CloudHandle};
use crate::config::Config;
use crate::controller::{submit, SubmitOutcome};
use crate::edge::{start_edge, EdgeConfig, EdgeHandle};
use crate::env::{ComputeMode, NodeEnv};
use crate::logging::Clock;
use crate::netio::{MemNet, Net};
use crate::ue::{run_ue, ScriptEntry, UeConfig, UeReport};
use crate::NodeError;

pub const CLOUD_ADDR: &str = "mem:cloud";

pub struct Cluster {
    pub cfg: Config,
    pub base: GridCase,
    pub net: Net,
    pub clock: Clock,
    pub compute: ComputeMode,
    pub cloud: CloudHandle,
    pub edges: BTreeMap<RegionId, EdgeHandle>,
}

impl Cluster {
    /// Starts the cloud and one edge per listed region, and waits until
    /// every edge has registered. Compute runs inline, which a paused clock
    /// requires; pass `ComputeMode::Worker` to [`Cluster::start_with`] for
    /// wall-clock runs.
    pub async fn start(cfg: &Config, base: &GridCase, regions: &[RegionId]) -> Result<Self, NodeError> {
        Self::start_with(cfg, base, regions, ComputeMode::Inline).await
    }

    pub async fn start_with(
        cfg: &Config,
        base: &GridCase,
        regions: &[RegionId],
        compute: ComputeMode,
    ) -> Result<Self, NodeError> {
        let net = Net::Mem(MemNet::default());
        let clock = match compute {
            ComputeMode::Inline => Clock::virtual_now(),
            ComputeMode::Worker => Clock::Wall,
        };
        let env = NodeEnv::from_config(cfg, "cloud", net.clone(), clock, compute, false)?;
        let cloud = start_cloud(
            CloudConfig {
                base: base.clone(),
                listen: CLOUD_ADDR.into(),
            },
            env,
        )
        .await?;
        let mut c = Self {
            cfg: cfg.clone(),
            base: base.clone(),
            net,
            clock,
            compute,
            cloud,
            edges: BTreeMap::new(),
        };
        for &r in regions {
            c.add_edge(r).await?;
        }
        Ok(c)
    }

    pub fn env(&self, node: &str) -> Result<NodeEnv, NodeError> {
        NodeEnv::from_config(&self.cfg, node, self.net.clone(), self.clock, self.compute, false)
    }

    pub fn edge_addr(r: RegionId) -> String {
        format!("mem:edge-{r}")
    }

    pub async fn add_edge(&mut self, r: RegionId) -> Result<(), NodeError> {
        let h = start_edge(
            EdgeConfig {
                region: r,
                base: self.base.clone(),
                listen: Self::edge_addr(r),
                cloud_addr: CLOUD_ADDR.into(),
                default_model: ErrorModel::gaussian(self.cfg.f64("dsa.sigma")?),
            },
            self.env(&format!("edge-{r}"))?,
        )
        .await?;
        self.edges.insert(r, h);
        let registered = self
            .poll(Duration::from_secs(5), |c| c.cloud.snapshot().edges.contains_key(&r))
            .await;
        if !registered {
            return Err(NodeError::Protocol(format!("edge {r} never registered with the cloud")));
        }
        Ok(())
    }

    pub async fn ue(&self, id: String, region: RegionId, script: Vec<ScriptEntry>) -> Result<UeReport, NodeError> {
        let env = self.env(&id)?;
        let cfg = UeConfig {
            id,
            region,
            edge_addr: Self::edge_addr(region),
            script,
            ack_timeout: Duration::from_secs_f64(self.cfg.f64("ue.ack_timeout_s")?),
        };
        Ok(run_ue(cfg, env).await)
    }

    pub async fn submit(&self, manifest: &RunManifest) -> Result<SubmitOutcome, NodeError> {
        submit(manifest, CLOUD_ADDR, &self.env("controller")?).await
    }

    /// Polls every 10 ms until `f` holds or `limit` passes.
    pub async fn poll(&self, limit: Duration, f: impl Fn(&Self) -> bool) -> bool {
        let deadline = tokio::time::Instant::now() + limit;
        while tokio::time::Instant::now() < deadline {
            if f(self) {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        f(self)
    }

    /// Waits until every edge of the run has seen its result or an error.
    pub async fn settle(&self, run: RunId) -> bool {
        self.poll(Duration::from_secs(5), |c| {
            c.edges.values().all(|e| {
                let st = e.snapshot();
                !st.runs.contains_key(&run) || st.results.contains_key(&run) || st.errors.iter().any(|(r, _)| *r == run)
            })
        })
        .await
    }

    pub fn shutdown(self) {
        for e in self.edges.values() {
            e.task.abort();
        }
        self.cloud.task.abort();
    }
}
