//! Nodes of the distributed stability-assessment workflow (UE agents, edge
//! servers, the cloud coordinator and a run controller) and the harness that
//! wires them together.

// `!(x > 0.0)` is how these checks reject NaN along with the bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cloud;
pub mod cluster;
pub mod compute;
pub mod config;
pub mod controller;
pub mod demo;
pub mod edge;
pub mod env;
pub mod logging;
pub mod netio;
pub mod report;
pub mod ue;

use edgegrid_transport::net::NetError;
use edgegrid_transport::store::StoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("connecting to {0}: {1}")]
    Connect(String, std::io::Error),
    #[error("listening on {0}: {1}")]
    Listen(String, std::io::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Compute(#[from] compute::ComputeError),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}
