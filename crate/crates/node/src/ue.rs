//! UE agent: replays a timed script of reports to its edge, one message in
//! flight at a time, waiting for each Ack.

use std::time::Duration;

use edgegrid_core::grid::RegionId;
use edgegrid_core::sampling::LoadForecast;
use edgegrid_transport::link::Direction;
use edgegrid_transport::messages::{BranchUpdate, BusLoadUpdate, ForecastReport, Hello, Message, Role, TopologyReport};
use edgegrid_transport::wire::RunId;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio::time::{sleep_until, timeout, Instant};

use crate::env::NodeEnv;
use crate::netio::{Incoming, MsgReader};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopologyDelta {
    #[serde(default)]
    pub branches: Vec<BranchUpdate>,
    #[serde(default)]
    pub buses: Vec<BusLoadUpdate>,
}

/// One scripted report, sent `at_s` seconds after the agent starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<Vec<LoadForecast>>,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>, String> {
    let script: Vec<ScriptEntry> = serde_json::from_str(text).map_err(|e| format!("UE script: {e}"))?;
    if script.windows(2).any(|w| w[0].at_s > w[1].at_s) {
        return Err("UE script timestamps must be nondecreasing".into());
    }
    if script
        .iter()
        .any(|e| !(e.at_s >= 0.0) || e.topology.is_some() == e.forecast.is_some())
    {
        return Err("each UE script entry needs at_s >= 0 and exactly one of topology or forecast".into());
    }
    Ok(script)
}

#[derive(Debug, Clone)]
pub struct UeConfig {
    pub id: String,
    pub region: RegionId,
    pub edge_addr: String,
    pub script: Vec<ScriptEntry>,
    pub ack_timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UeReport {
    pub id: String,
    pub sent: usize,
    pub delivered: Vec<u64>,
    pub failed: Vec<u64>,
    pub rejected: Vec<u64>,
    pub error: Option<String>,
}

enum Reply {
    Ack(u64),
    Rejected(String),
}

pub async fn run_ue(cfg: UeConfig, env: NodeEnv) -> UeReport {
    let log = &env.log;
    let mut report = UeReport {
        id: cfg.id.clone(),
        ..Default::default()
    };
    let (r, w) = match env.net.connect(&cfg.edge_addr).await {
        Ok(c) => c,
        Err(e) => {
            log.event("ue_connect_failed", &[("addr", &cfg.edge_addr), ("error", &e)]);
            report.error = Some(format!("connecting to {}: {e}", cfg.edge_addr));
            return report;
        }
    };
    let tx = match env.sender(w, &cfg.edge_addr, Direction::Up) {
        Ok(tx) => tx,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    let (reply_tx, mut replies) = mpsc::unbounded_channel();
    let reader = tokio::spawn(async move {
        let mut rx = MsgReader::new(r);
        while let Ok(Some(msg)) = rx.recv().await {
            let reply = match msg {
                Incoming::Msg(_, Message::Ack(a)) => a.of.map(Reply::Ack),
                Incoming::Msg(_, Message::ErrorMsg(e)) => Some(Reply::Rejected(e.text)),
                _ => None,
            };
            if let Some(reply) = reply {
                if reply_tx.send(reply).is_err() {
                    break;
                }
            }
        }
    });

    let hello = Message::Hello(Hello {
        node_id: cfg.id.clone(),
        role: Role::Ue,
        region: Some(cfg.region),
    });
    let mut last_delivery = tx.send(RunId::NIL, &hello).ok().flatten();
    log.event("ue_hello", &[("edge", &cfg.edge_addr), ("region", &cfg.region)]);

    let start = Instant::now();
    for (i, entry) in cfg.script.iter().enumerate() {
        let seq = i as u64 + 1;
        sleep_until(start + Duration::from_secs_f64(entry.at_s)).await;
        let msg = match (&entry.topology, &entry.forecast) {
            (Some(t), _) => Message::TopologyReport(TopologyReport {
                seq,
                node_id: cfg.id.clone(),
                branches: t.branches.clone(),
                buses: t.buses.clone(),
            }),
            (None, Some(loads)) => Message::ForecastReport(ForecastReport {
                seq,
                node_id: cfg.id.clone(),
                loads: loads.clone(),
            }),
            (None, None) => continue,
        };
        let mut outcome = None;
        for attempt in 0..2 {
            log.event("ue_send", &[("seq", &seq), ("attempt", &attempt)]);
            match tx.send(RunId::NIL, &msg) {
                Ok(at) => last_delivery = at.or(last_delivery),
                Err(e) => {
                    report.error = Some(e.to_string());
                    break;
                }
            }
            report.sent += 1;
            let deadline = Instant::now() + cfg.ack_timeout;
            loop {
                match timeout(deadline.saturating_duration_since(Instant::now()), replies.recv()).await {
                    Ok(Some(Reply::Ack(of))) if of == seq => {
                        outcome = Some(Ok(()));
                        break;
                    }
                    // a late Ack for an earlier message
                    Ok(Some(Reply::Ack(_))) => continue,
                    Ok(Some(Reply::Rejected(text))) => {
                        outcome = Some(Err(text));
                        break;
                    }
                    Ok(None) | Err(_) => break,
                }
            }
            if outcome.is_some() || report.error.is_some() {
                break;
            }
            log.event("ue_ack_timeout", &[("seq", &seq), ("attempt", &attempt)]);
        }
        match outcome {
            Some(Ok(())) => {
                log.event("ue_ack", &[("seq", &seq)]);
                report.delivered.push(seq);
            }
            Some(Err(text)) => {
                log.event("ue_rejected", &[("seq", &seq), ("text", &text)]);
                report.rejected.push(seq);
            }
            None => {
                log.event("ue_failed", &[("seq", &seq)]);
                report.failed.push(seq);
            }
        }
        if report.error.is_some() {
            break;
        }
    }
    // let the last frame leave the emulated link before closing
    if let Some(at) = last_delivery {
        sleep_until(env.link_clock.instant_at(at)).await;
    }
    drop(tx);
    reader.abort();
    log.event(
        "ue_done",
        &[
            ("delivered", &report.delivered.len()),
            ("failed", &report.failed.len()),
            ("rejected", &report.rejected.len()),
        ],
    );
    report
}
