//! Run submission: opens a run at the cloud and waits for its result.

use std::time::Duration;

use edgegrid_transport::link::{Direction, LinkProfile};
use edgegrid_transport::messages::{ErrorCode, ErrorMsg, Hello, Message, Role, RunManifest, RunResult};
use tokio::time::timeout;

use crate::env::NodeEnv;
use crate::netio::{Incoming, MsgReader, MsgSender};
use crate::NodeError;

/// Extra wait beyond the barrier deadline for merge and simulation.
pub const COMPUTE_GRACE: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq)]
pub enum SubmitOutcome {
    Completed(RunResult),
    Failed(ErrorMsg),
}

impl SubmitOutcome {
    /// 0 on a result, 3 when the barrier timed out, 2 on any other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SubmitOutcome::Completed(_) => 0,
            SubmitOutcome::Failed(e) if e.code == ErrorCode::BarrierTimeout => 3,
            SubmitOutcome::Failed(_) => 2,
        }
    }
}

/// The controller sits beside the cloud, so its link is not impaired.
pub async fn submit(manifest: &RunManifest, cloud_addr: &str, env: &NodeEnv) -> Result<SubmitOutcome, NodeError> {
    let log = &env.log;
    let (r, w) = env
        .net
        .connect(cloud_addr)
        .await
        .map_err(|e| NodeError::Connect(cloud_addr.to_string(), e))?;
    let tx = MsgSender::new(w, LinkProfile::zero_impairment(), Direction::Up, env.link_clock)?;
    let run = manifest.run_id;
    tx.send(
        run,
        &Message::Hello(Hello {
            node_id: log.node().to_string(),
            role: Role::Controller,
            region: None,
        }),
    )?;
    tx.send(run, &Message::RunOpen(manifest.clone()))?;
    log.event("run_submitted", &[("run", &run)]);

    let mut rx = MsgReader::new(r);
    let limit = Duration::from_secs_f64(manifest.deadline_s) + COMPUTE_GRACE;
    let wait = async {
        loop {
            match rx.recv().await? {
                Some(Incoming::Msg(id, Message::RunResult(res))) if id == run => {
                    return Ok(SubmitOutcome::Completed(res));
                }
                Some(Incoming::Msg(id, Message::ErrorMsg(e))) if id == run => {
                    return Ok(SubmitOutcome::Failed(e));
                }
                Some(_) => continue,
                None => {
                    return Err(NodeError::Protocol(
                        "cloud closed the connection before replying".into(),
                    ))
                }
            }
        }
    };
    let outcome = timeout(limit, wait)
        .await
        .map_err(|_| NodeError::Protocol(format!("no reply for run {run} within {limit:?}")))??;
    match &outcome {
        SubmitOutcome::Completed(res) => {
            log.event("run_completed", &[("run", &run), ("key", &res.store_key)]);
        }
        SubmitOutcome::Failed(e) => {
            log.event("run_failed", &[("run", &run), ("text", &e.text)]);
        }
    }
    Ok(outcome)
}
