use edgegrid_transport::link::{Direction, LinkProfile};
use edgegrid_transport::net::{LinkClock, NetError};
use edgegrid_transport::store::FsStore;

use crate::logging::Logger;
use crate::netio::{BoxWrite, MsgSender, Net};

/// Where heavy computation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeMode {
    /// On the blocking pool (and rayon for scenario fan-out), so socket
    /// handling never waits on matrix work.
    Worker,
    /// On the calling task. Needed under a paused clock, where time would
    /// otherwise advance while a blocking job runs.
    Inline,
}

/// Everything a node needs from its surroundings.
#[derive(Clone)]
pub struct NodeEnv {
    pub net: Net,
    pub profile: LinkProfile,
    pub log: Logger,
    pub store: FsStore,
    pub link_clock: LinkClock,
    pub compute: ComputeMode,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl NodeEnv {
    /// Each link gets its own seed derived from the profile seed and the
    /// link's endpoints, so parallel links do not share jitter draws.
    pub fn sender(&self, w: BoxWrite, peer: &str, dir: Direction) -> Result<MsgSender, NetError> {
        let mut p = self.profile;
        p.seed ^= fnv1a(&format!("{}>{}", self.log.node(), peer));
        MsgSender::new(w, p, dir, self.link_clock)
    }

    /// Opens the configured store and log directory for `node`.
    pub fn from_config(
        cfg: &crate::config::Config,
        node: &str,
        net: Net,
        clock: crate::logging::Clock,
        compute: ComputeMode,
        stderr: bool,
    ) -> Result<Self, crate::NodeError> {
        let mut log = Logger::new(node, clock);
        if stderr {
            log = log.with_stderr();
        }
        if let Some(dir) = cfg.opt_path("log.dir") {
            log = log.with_dir(&dir)?;
        }
        Ok(Self {
            net,
            profile: cfg.link_profile()?,
            log,
            store: FsStore::open(cfg.string("store.root"))?,
            link_clock: LinkClock::start(),
            compute,
        })
    }
}
