//! The pure computations behind each node, shared by the distributed
//! nodes and the in-process reference pipeline.

use std::collections::{BTreeMap, BTreeSet};

use edgegrid_core::dynamics::{assess_run, DynamicsError, SecurityReport, SimulationConfig, SimulationResult, Verdict};
use edgegrid_core::grid::{
    default_bus_owner, default_partition, merge_partials, stage_branch_sets, Bus, BusId, FaultSpec, FaultVariants,
    GridCase, GridError, PartialAdmittance, RegionId, YMatrix,
};
use edgegrid_core::pipeline::{simulate_with_stages, PipelineError};
use edgegrid_core::sampling::{
    apply_scenario, combine_regional, draw_samples, reduce_scenarios, ErrorModel, ForecastSpec, LoadForecast,
    SamplingError, Scenario, ScenarioSet,
};
use edgegrid_transport::messages::{BranchUpdate, DsaParams, ResultSummary, RunManifest, RunMode};
use edgegrid_transport::wire::RunId;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("upload from region {region} is invalid: {msg}")]
    BadUpload { region: RegionId, msg: String },
    #[error("{0}")]
    Missing(String),
}

/// What an edge uploads for one run: its partial admittances for the three
/// fault stages plus the records it is authoritative for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionUpload {
    pub region: RegionId,
    pub stages: FaultVariants<PartialAdmittance>,
    pub buses: Vec<Bus>,
    pub branches: Vec<BranchUpdate>,
}

/// Result blob stored by the cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: RunId,
    pub summary: ResultSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<SecurityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<ScenarioSet>,
}

pub fn region_upload(view: &GridCase, region: RegionId, fault: &FaultSpec) -> Result<RegionUpload, GridError> {
    let stages = FaultVariants::<PartialAdmittance>::for_region(
        view,
        region,
        &default_partition(view),
        &default_bus_owner(view),
        fault,
    )?;
    Ok(RegionUpload {
        region,
        stages,
        buses: view.buses.iter().filter(|b| b.region == region).cloned().collect(),
        branches: view
            .branches
            .iter()
            .filter(|b| b.owner_region == region)
            .map(|b| BranchUpdate {
                branch: b.id,
                status: b.status,
            })
            .collect(),
    })
}

/// Load buses owned by `region`, with their error models: `default_model`
/// unless overridden.
pub fn region_forecast(
    view: &GridCase,
    region: RegionId,
    default_model: ErrorModel,
    overrides: &BTreeMap<BusId, ErrorModel>,
) -> Result<ForecastSpec, SamplingError> {
    ForecastSpec::new(
        view.buses
            .iter()
            .filter(|b| b.region == region && b.has_load())
            .map(|b| LoadForecast {
                bus: b.id,
                model: overrides.get(&b.id).copied().unwrap_or(default_model),
            })
            .collect(),
    )
}

pub fn region_scenarios(spec: &ForecastSpec, params: &DsaParams) -> Result<ScenarioSet, SamplingError> {
    let samples = draw_samples(spec, params.n_raw, params.seed)?;
    reduce_scenarios(&samples, params.k.min(params.n_raw), params.seed)
}

/// Rebuilds the system case from the base case and each region's records.
pub fn assemble_case(base: &GridCase, uploads: &[RegionUpload]) -> Result<GridCase, ComputeError> {
    let mut case = base.clone();
    for up in uploads {
        let bad = |msg: String| ComputeError::BadUpload { region: up.region, msg };
        for bus in &up.buses {
            let idx = case
                .bus_index(bus.id)
                .ok_or_else(|| bad(format!("unknown bus {}", bus.id)))?;
            if case.buses[idx].region != up.region {
                return Err(bad(format!(
                    "bus {} belongs to region {}",
                    bus.id, case.buses[idx].region
                )));
            }
            case.buses[idx].p_load = bus.p_load;
            case.buses[idx].q_load = bus.q_load;
        }
        for u in &up.branches {
            let br = case
                .branch_mut(u.branch)
                .ok_or_else(|| bad(format!("unknown branch {}", u.branch)))?;
            if br.owner_region != up.region {
                return Err(bad(format!(
                    "branch {} belongs to region {}",
                    u.branch, br.owner_region
                )));
            }
            br.status = u.status;
        }
    }
    Ok(GridCase::new(
        case.base_mva,
        case.freq_hz,
        case.buses,
        case.branches,
        case.generators,
    )?)
}

/// Sums each stage in ascending region order and checks branch coverage.
pub fn merge_stages(
    case: &GridCase,
    fault: &FaultSpec,
    uploads: &[RegionUpload],
) -> Result<FaultVariants<YMatrix>, GridError> {
    let expected = stage_branch_sets(case, fault);
    let stage = |pick: fn(&FaultVariants<PartialAdmittance>) -> &PartialAdmittance, set: &BTreeSet<u32>| {
        let parts: Vec<PartialAdmittance> = uploads.iter().map(|u| pick(&u.stages).clone()).collect();
        merge_partials(&parts, set)
    };
    Ok(FaultVariants {
        pre: stage(|s| &s.pre, &expected.pre)?,
        on: stage(|s| &s.on, &expected.on)?,
        post: stage(|s| &s.post, &expected.post)?,
    })
}

fn simulate_scenarios(
    case: &GridCase,
    stages: &FaultVariants<YMatrix>,
    fault: &FaultSpec,
    cfg: &SimulationConfig,
    scenarios: &[Scenario],
    parallel: bool,
) -> Result<Vec<SimulationResult>, ComputeError> {
    let one = |s: &Scenario| -> Result<SimulationResult, ComputeError> {
        let scaled = apply_scenario(case, s)?;
        Ok(simulate_with_stages(&scaled, stages, fault, cfg)?)
    };
    if parallel {
        scenarios.par_iter().map(one).collect()
    } else {
        scenarios.iter().map(one).collect()
    }
}

/// Cloud-side computation once the barrier has passed. Uploads and
/// scenario sets must be in ascending region order.
pub fn cloud_compute(
    base: &GridCase,
    manifest: &RunManifest,
    uploads: &[RegionUpload],
    scenario_sets: &[ScenarioSet],
    parallel: bool,
) -> Result<RunOutcome, ComputeError> {
    let regions: Vec<RegionId> = uploads.iter().map(|u| u.region).collect();
    if regions.iter().copied().collect::<BTreeSet<_>>() != manifest.expected_regions
        || regions.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(ComputeError::Missing(format!(
            "uploads from regions {regions:?} do not match the expected {:?}",
            manifest.expected_regions
        )));
    }
    let case = assemble_case(base, uploads)?;
    let stages = merge_stages(&case, &manifest.fault, uploads)?;
    match manifest.mode {
        RunMode::Topology => {
            let sim = simulate_with_stages(&case, &stages, &manifest.fault, &manifest.sim_cfg)?;
            let unstable = sim.verdict == Verdict::Unstable;
            Ok(RunOutcome {
                run_id: manifest.run_id,
                summary: ResultSummary {
                    mode: RunMode::Topology,
                    n_scenarios: 1,
                    n_unstable: usize::from(unstable),
                    insecurity_probability: if unstable { 1.0 } else { 0.0 },
                    verdict: Some(sim.verdict),
                },
                simulation: Some(sim),
                assessment: None,
                scenarios: None,
            })
        }
        RunMode::Dsa => {
            let params = manifest
                .dsa
                .ok_or_else(|| ComputeError::Missing("DSA run without sampling parameters".into()))?;
            let combined = combine_regional(scenario_sets, params.k, params.seed)?;
            let results = simulate_scenarios(
                &case,
                &stages,
                &manifest.fault,
                &manifest.sim_cfg,
                &combined.representatives,
                parallel,
            )?;
            let weighted: Vec<(f64, &SimulationResult)> = combined.weights.iter().copied().zip(&results).collect();
            let report = assess_run(&weighted)?;
            Ok(RunOutcome {
                run_id: manifest.run_id,
                summary: ResultSummary {
                    mode: RunMode::Dsa,
                    n_scenarios: results.len(),
                    n_unstable: results.iter().filter(|r| r.verdict == Verdict::Unstable).count(),
                    insecurity_probability: report.insecurity_probability,
                    verdict: None,
                },
                simulation: None,
                assessment: Some(report),
                scenarios: Some(combined),
            })
        }
    }
}

/// Region views after each region's own topology and load updates.
pub type RegionViews = BTreeMap<RegionId, GridCase>;

/// The whole workflow in one process, with no network and no store: the
/// reference the distributed run must reproduce bit for bit.
pub fn monolithic(
    base: &GridCase,
    views: &RegionViews,
    manifest: &RunManifest,
    forecasts: &BTreeMap<RegionId, ForecastSpec>,
) -> Result<RunOutcome, ComputeError> {
    let mut uploads = Vec::new();
    let mut sets = Vec::new();
    for &r in &manifest.expected_regions {
        let view = views.get(&r).unwrap_or(base);
        uploads.push(region_upload(view, r, &manifest.fault)?);
        if let (RunMode::Dsa, Some(p)) = (manifest.mode, manifest.dsa) {
            let spec = forecasts
                .get(&r)
                .ok_or_else(|| ComputeError::Missing(format!("no forecast for region {r}")))?;
            sets.push(region_scenarios(spec, &p)?);
        }
    }
    cloud_compute(base, manifest, &uploads, &sets, false)
}

/// Unweighted insecurity probability over every raw scenario, drawn
/// system-wide with the run's seed.
pub fn brute_force_probability(
    base: &GridCase,
    views: &RegionViews,
    manifest: &RunManifest,
    forecasts: &BTreeMap<RegionId, ForecastSpec>,
) -> Result<f64, ComputeError> {
    let params = manifest
        .dsa
        .ok_or_else(|| ComputeError::Missing("DSA run without sampling parameters".into()))?;
    let mut uploads = Vec::new();
    let mut loads = Vec::new();
    for &r in &manifest.expected_regions {
        uploads.push(region_upload(views.get(&r).unwrap_or(base), r, &manifest.fault)?);
        loads.extend(forecasts.get(&r).map(|s| s.loads.clone()).unwrap_or_default());
    }
    let case = assemble_case(base, &uploads)?;
    let stages = merge_stages(&case, &manifest.fault, &uploads)?;
    let samples = draw_samples(&ForecastSpec::new(loads)?, params.n_raw, params.seed)?;
    let results = simulate_scenarios(&case, &stages, &manifest.fault, &manifest.sim_cfg, &samples, true)?;
    let unstable = results.iter().filter(|r| r.verdict == Verdict::Unstable).count();
    Ok(unstable as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgegrid_core::cases::case9;
    use edgegrid_core::grid::BranchStatus;
    use edgegrid_core::pipeline::simulate_case;
    use edgegrid_transport::wire::{from_payload, to_payload};

    fn manifest(mode: RunMode) -> RunManifest {
        RunManifest {
            run_id: RunId::from_seed(1),
            expected_regions: [1, 2, 3].into(),
            fault: FaultSpec::new(7, Some(4), 0.1, 0.2),
            sim_cfg: SimulationConfig::new(60.0, 1.0),
            mode,
            dsa: (mode == RunMode::Dsa).then_some(DsaParams {
                n_raw: 30,
                k: 5,
                seed: 3,
            }),
            deadline_s: 30.0,
        }
    }

    #[test]
    fn merged_run_tracks_the_direct_pipeline() {
        let case = case9();
        let m = manifest(RunMode::Topology);
        let out = monolithic(&case, &RegionViews::new(), &m, &BTreeMap::new()).unwrap();
        let direct = simulate_case(&case, &m.fault, &m.sim_cfg).unwrap();
        let sim = out.simulation.unwrap();
        assert_eq!(sim.verdict, direct.verdict);
        for (a, b) in sim.delta.iter().flatten().zip(direct.delta.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uploads_carry_only_owned_records() {
        let case = case9();
        let up = region_upload(&case, 2, &FaultSpec::new(7, Some(4), 0.1, 0.2)).unwrap();
        assert_eq!(up.buses.iter().map(|b| b.id).collect::<Vec<_>>(), vec![2, 7, 8]);
        assert!(up
            .branches
            .iter()
            .all(|b| case.branch(b.branch).unwrap().owner_region == 2));
        // the fault shunt lives with the region owning bus 7
        assert_ne!(up.stages.on, up.stages.pre);
        assert_eq!(up.stages.post, up.stages.pre);
    }

    #[test]
    fn foreign_records_are_rejected() {
        let case = case9();
        let mut up = region_upload(&case, 1, &FaultSpec::new(7, None, 0.1, 0.2)).unwrap();
        up.branches.push(BranchUpdate {
            branch: 6,
            status: BranchStatus::Open,
        });
        assert!(matches!(
            assemble_case(&case, &[up]),
            Err(ComputeError::BadUpload { region: 1, .. })
        ));
    }

    #[test]
    fn dsa_reference_is_deterministic() {
        let case = case9();
        let m = manifest(RunMode::Dsa);
        let forecasts: BTreeMap<_, _> = [1, 2, 3]
            .into_iter()
            .map(|r| {
                (
                    r,
                    region_forecast(&case, r, ErrorModel::gaussian(0.05), &BTreeMap::new()).unwrap(),
                )
            })
            .collect();
        let a = monolithic(&case, &RegionViews::new(), &m, &forecasts).unwrap();
        let b = monolithic(&case, &RegionViews::new(), &m, &forecasts).unwrap();
        assert_eq!(a, b);
        let blob = to_payload(&a);
        assert_eq!(from_payload::<RunOutcome>(&blob).unwrap(), a);
        let w: f64 = a.scenarios.unwrap().weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-9);
        let p = brute_force_probability(&case, &RegionViews::new(), &m, &forecasts).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn uploads_survive_the_store_encoding() {
        let case = case9();
        let up = region_upload(&case, 2, &FaultSpec::new(7, Some(4), 0.1, 0.2)).unwrap();
        let blob = to_payload(&up);
        assert_eq!(from_payload::<RegionUpload>(&blob).unwrap(), up);
        let sim = monolithic(
            &case,
            &RegionViews::new(),
            &manifest(RunMode::Topology),
            &BTreeMap::new(),
        )
        .unwrap();
        let again: RunOutcome = from_payload(&to_payload(&sim)).unwrap();
        assert_eq!(to_payload(&again), to_payload(&sim));
    }
}
