//! Typed payloads for each message kind.

use std::collections::BTreeSet;

use edgegrid_core::dynamics::{SimulationConfig, Verdict};
use edgegrid_core::grid::{BranchId, BranchStatus, BusId, FaultSpec, RegionId};
use edgegrid_core::sampling::LoadForecast;
use serde::{Deserialize, Serialize};

use crate::store::StoreKey;
use crate::wire::{from_payload, to_payload, Envelope, MsgType, RunId, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ue,
    Edge,
    Cloud,
    Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub node_id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionId>,
}

/// Absolute status assignment; applying it twice is the same as once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchUpdate {
    pub branch: BranchId,
    pub status: BranchStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusLoadUpdate {
    pub bus: BusId,
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub seq: u64,
    pub node_id: String,
    #[serde(default)]
    pub branches: Vec<BranchUpdate>,
    #[serde(default)]
    pub buses: Vec<BusLoadUpdate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub seq: u64,
    pub node_id: String,
    pub loads: Vec<LoadForecast>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ack {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub of: Option<u64>,
}

/// Announces an upload; used for both partial admittances and scenario sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReady {
    pub seq: u64,
    pub region: RegionId,
    pub store_key: StoreKey,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Topology,
    Dsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaParams {
    pub n_raw: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: RunId,
    pub expected_regions: BTreeSet<RegionId>,
    pub fault: FaultSpec,
    pub sim_cfg: SimulationConfig,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsa: Option<DsaParams>,
    pub deadline_s: f64,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), String> {
        if self.expected_regions.is_empty() {
            return Err("expected_regions is empty".into());
        }
        if !(self.deadline_s > 0.0 && self.deadline_s.is_finite()) {
            return Err("deadline must be a positive number of seconds".into());
        }
        match (self.mode, &self.dsa) {
            (RunMode::Dsa, None) => Err("DSA runs need n_raw, k and seed".into()),
            (RunMode::Dsa, Some(p)) if p.k == 0 || p.k > p.n_raw => {
                Err(format!("k = {} must be between 1 and n_raw = {}", p.k, p.n_raw))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub mode: RunMode,
    pub n_scenarios: usize,
    pub n_unstable: usize,
    /// Weighted probability of an unstable verdict (1 or 0 for topology runs).
    pub insecurity_probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub store_key: StoreKey,
    pub summary: ResultSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BarrierTimeout,
    DuplicateUpload,
    DuplicateRun,
    UnknownRun,
    MalformedReport,
    ComputeFailed,
    MergeFailed,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub text: String,
    /// Regions the error concerns, e.g. those missing at a barrier timeout.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<RegionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunClose {
    pub run_id: RunId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    TopologyReport(TopologyReport),
    ForecastReport(ForecastReport),
    Ack(Ack),
    PartialReady(UploadReady),
    ScenarioReady(UploadReady),
    RunResult(RunResult),
    ErrorMsg(ErrorMsg),
    RunOpen(RunManifest),
    RunClose(RunClose),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello(_) => MsgType::Hello,
            Message::TopologyReport(_) => MsgType::TopologyReport,
            Message::ForecastReport(_) => MsgType::ForecastReport,
            Message::Ack(_) => MsgType::Ack,
            Message::PartialReady(_) => MsgType::PartialReady,
            Message::ScenarioReady(_) => MsgType::ScenarioReady,
            Message::RunResult(_) => MsgType::RunResult,
            Message::ErrorMsg(_) => MsgType::ErrorMsg,
            Message::RunOpen(_) => MsgType::RunOpen,
            Message::RunClose(_) => MsgType::RunClose,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match self {
            Message::Hello(m) => to_payload(m),
            Message::TopologyReport(m) => to_payload(m),
            Message::ForecastReport(m) => to_payload(m),
            Message::Ack(m) => to_payload(m),
            Message::PartialReady(m) | Message::ScenarioReady(m) => to_payload(m),
            Message::RunResult(m) => to_payload(m),
            Message::ErrorMsg(m) => to_payload(m),
            Message::RunOpen(m) => to_payload(m),
            Message::RunClose(m) => to_payload(m),
        }
    }

    pub fn to_envelope(&self, run_id: RunId) -> Envelope {
        Envelope::new(self.msg_type(), run_id, self.payload())
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self, WireError> {
        let p = &env.payload;
        Ok(match env.msg_type {
            MsgType::Hello => Message::Hello(from_payload(p)?),
            MsgType::TopologyReport => Message::TopologyReport(from_payload(p)?),
            MsgType::ForecastReport => Message::ForecastReport(from_payload(p)?),
            MsgType::Ack => Message::Ack(from_payload(p)?),
            MsgType::PartialReady => Message::PartialReady(from_payload(p)?),
            MsgType::ScenarioReady => Message::ScenarioReady(from_payload(p)?),
            MsgType::RunResult => Message::RunResult(from_payload(p)?),
            MsgType::ErrorMsg => Message::ErrorMsg(from_payload(p)?),
            MsgType::RunOpen => Message::RunOpen(from_payload(p)?),
            MsgType::RunClose => Message::RunClose(from_payload(p)?),
        })
    }
}
