//! Power flow → machine initialization → network reduction → simulation.

use thiserror::Error;

use crate::dynamics::{reduce_network, simulate_dynamics, DynamicsError, SimulationConfig, SimulationResult};
use crate::grid::{build_ybus, fault_variants, FaultSpec, FaultVariants, GridCase, GridError, YMatrix};
use crate::powerflow::{
    initialize_machines_with, solve_power_flow_with, PowerFlowError, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Solves the pre-fault operating point on `stages.pre`, initializes the
/// machines and simulates the fault sequence.
pub fn simulate_with_stages(
    case: &GridCase,
    stages: &FaultVariants<YMatrix>,
    fault: &FaultSpec,
    cfg: &SimulationConfig,
) -> Result<SimulationResult, PipelineError> {
    let sol = solve_power_flow_with(case, &stages.pre, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER)?;
    let init = initialize_machines_with(case, &stages.pre, &sol)?;
    let net = reduce_network(stages, &init, &sol)?;
    Ok(simulate_dynamics(&init, &net, fault, cfg)?)
}

/// [`simulate_with_stages`] with the stage matrices built from the case.
pub fn simulate_case(
    case: &GridCase,
    fault: &FaultSpec,
    cfg: &SimulationConfig,
) -> Result<SimulationResult, PipelineError> {
    let y = build_ybus(case)?;
    let stages = fault_variants(&y, case, fault)?;
    simulate_with_stages(case, &stages, fault, cfg)
}
