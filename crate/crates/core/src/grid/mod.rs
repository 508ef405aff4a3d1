//! Grid data model.
//!
//! Quantities are per-unit on the case's MVA base; angles are radians.
//! Buses are kept sorted by id and matrix indices follow that order.

mod casefile;
mod ybus;

pub use casefile::{parse_case, read_case, write_case, CaseFileError};
pub use ybus::{
    build_partial, build_partial_default, build_ybus, default_bus_owner, default_partition, fault_variants,
    merge_partials, stage_branch_sets, FaultVariants, PartialAdmittance, YMatrix,
};

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type BusId = u32;
pub type BranchId = u32;
pub type GenId = u32;
pub type RegionId = u32;

/// Near-bolted three-phase fault shunt.
pub const DEFAULT_FAULT_ADMITTANCE: Complex64 = Complex64::new(0.0, -1e6);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("case has {0} slack buses, expected exactly one")]
    SlackCount(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("duplicate branch id {0}")]
    DuplicateBranch(BranchId),
    #[error("bus {0} has non-positive voltage magnitude")]
    NonPositiveVoltage(BusId),
    #[error("branch {0} references unknown bus {1}")]
    UnknownBranchBus(BranchId, BusId),
    #[error("branch {0} connects bus {1} to itself")]
    SelfLoop(BranchId, BusId),
    #[error("branch {0} has zero series impedance")]
    DegenerateBranch(BranchId),
    #[error("branch {0} has non-positive tap ratio")]
    NonPositiveTap(BranchId),
    #[error("generator {0} references unknown bus {1}")]
    UnknownGeneratorBus(GenId, BusId),
    #[error("generator {0} has invalid parameters: {1}")]
    InvalidGenerator(GenId, &'static str),
    #[error("network is not connected over closed branches ({0} islands)")]
    Disconnected(usize),
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("unknown branch {0}")]
    UnknownBranch(BranchId),
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("branch {0} is not covered by the partition")]
    UnpartitionedBranch(BranchId),
    #[error("bus {0} has no owning region")]
    UnownedBus(BusId),
    #[error("partials disagree on dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("branch {0} is stamped by more than one partial")]
    DuplicateCoverage(BranchId),
    #[error("merged partials do not cover the expected branch set (missing {missing:?}, unexpected {unexpected:?})")]
    IncompleteCoverage {
        missing: Vec<BranchId>,
        unexpected: Vec<BranchId>,
    },
    #[error("invalid fault: {0}")]
    InvalidFault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub v_mag: f64,
    pub v_ang: f64,
    pub p_load: f64,
    pub q_load: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    /// Region that owns this bus's shunt and its load data.
    pub region: RegionId,
}

impl Bus {
    pub fn has_load(&self) -> bool {
        self.p_load != 0.0 || self.q_load != 0.0
    }

    pub fn voltage(&self) -> Complex64 {
        Complex64::from_polar(self.v_mag, self.v_ang)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchStatus {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: BranchId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    pub b_charge: f64,
    pub tap: f64,
    pub status: BranchStatus,
    pub owner_region: RegionId,
}

impl Branch {
    pub fn is_closed(&self) -> bool {
        self.status == BranchStatus::Closed
    }

    pub fn series_admittance(&self) -> Result<Complex64, GridError> {
        if self.r == 0.0 && self.x == 0.0 {
            return Err(GridError::DegenerateBranch(self.id));
        }
        Ok(reciprocal(Complex64::new(self.r, self.x)))
    }
}

/// `1/z` by Smith's method; exact for purely real or imaginary `z`.
pub fn reciprocal(z: Complex64) -> Complex64 {
    if z.re.abs() >= z.im.abs() {
        let t = z.im / z.re;
        let den = z.re + z.im * t;
        Complex64::new(1.0 / den, -t / den)
    } else {
        let t = z.re / z.im;
        let den = z.im + z.re * t;
        Complex64::new(t / den, -1.0 / den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: GenId,
    pub bus: BusId,
    /// Inertia constant in seconds on the system base.
    pub h: f64,
    pub d: f64,
    pub xd_p: f64,
    pub p_mech: f64,
    pub e_mag: f64,
    pub delta0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub base_mva: f64,
    pub freq_hz: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

impl GridCase {
    /// Sorts buses by id and checks every case invariant.
    pub fn new(
        base_mva: f64,
        freq_hz: f64,
        mut buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
    ) -> Result<Self, GridError> {
        buses.sort_by_key(|b| b.id);
        let case = Self {
            base_mva,
            freq_hz,
            buses,
            branches,
            generators,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for w in self.buses.windows(2) {
            if w[0].id == w[1].id {
                return Err(GridError::DuplicateBus(w[0].id));
            }
        }
        let slack = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack != 1 {
            return Err(GridError::SlackCount(slack));
        }
        if let Some(b) = self.buses.iter().find(|b| !(b.v_mag > 0.0)) {
            return Err(GridError::NonPositiveVoltage(b.id));
        }
        let mut seen = BTreeSet::new();
        for br in &self.branches {
            if !seen.insert(br.id) {
                return Err(GridError::DuplicateBranch(br.id));
            }
            for end in [br.from_bus, br.to_bus] {
                if self.bus_index(end).is_none() {
                    return Err(GridError::UnknownBranchBus(br.id, end));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(GridError::SelfLoop(br.id, br.from_bus));
            }
            br.series_admittance()?;
            if !(br.tap > 0.0) {
                return Err(GridError::NonPositiveTap(br.id));
            }
        }
        for g in &self.generators {
            if self.bus_index(g.bus).is_none() {
                return Err(GridError::UnknownGeneratorBus(g.id, g.bus));
            }
            if !(g.h > 0.0) {
                return Err(GridError::InvalidGenerator(g.id, "inertia must be positive"));
            }
            if !(g.xd_p > 0.0) {
                return Err(GridError::InvalidGenerator(
                    g.id,
                    "transient reactance must be positive",
                ));
            }
            if !(g.e_mag > 0.0) {
                return Err(GridError::InvalidGenerator(g.id, "internal EMF must be positive"));
            }
        }
        let islands = self.island_count();
        if islands > 1 {
            return Err(GridError::Disconnected(islands));
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Matrix index of a bus id.
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.buses.binary_search_by_key(&id, |b| b.id).ok()
    }

    pub fn bus(&self, id: BusId) -> Option<&Bus> {
        self.bus_index(id).map(|i| &self.buses[i])
    }

    pub fn branch(&self, id: BranchId) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn branch_mut(&mut self, id: BranchId) -> Option<&mut Branch> {
        self.branches.iter_mut().find(|b| b.id == id)
    }

    pub fn closed_branch_ids(&self) -> BTreeSet<BranchId> {
        self.branches.iter().filter(|b| b.is_closed()).map(|b| b.id).collect()
    }

    pub fn regions(&self) -> BTreeSet<RegionId> {
        self.buses
            .iter()
            .map(|b| b.region)
            .chain(self.branches.iter().map(|b| b.owner_region))
            .collect()
    }

    /// Buses carrying load, in ascending id order.
    pub fn load_buses(&self) -> Vec<BusId> {
        self.buses.iter().filter(|b| b.has_load()).map(|b| b.id).collect()
    }

    /// Copy with one branch set to the given status.
    pub fn with_branch_status(&self, id: BranchId, status: BranchStatus) -> Result<Self, GridError> {
        let mut out = self.clone();
        out.branch_mut(id).ok_or(GridError::UnknownBranch(id))?.status = status;
        Ok(out)
    }

    fn island_count(&self) -> usize {
        let n = self.buses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for br in self.branches.iter().filter(|b| b.is_closed()) {
            let (Some(a), Some(b)) = (self.bus_index(br.from_bus), self.bus_index(br.to_bus)) else {
                continue;
            };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }
}

/// A fault applied at `t_fault` and cleared at `t_clear`, optionally by
/// tripping a branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub faulted_bus: BusId,
    pub cleared_branch: Option<BranchId>,
    pub t_fault: f64,
    pub t_clear: f64,
    pub y_fault: Complex64,
}

impl FaultSpec {
    pub fn new(faulted_bus: BusId, cleared_branch: Option<BranchId>, t_fault: f64, t_clear: f64) -> Self {
        Self {
            faulted_bus,
            cleared_branch,
            t_fault,
            t_clear,
            y_fault: DEFAULT_FAULT_ADMITTANCE,
        }
    }

    pub fn validate(&self, case: &GridCase) -> Result<(), GridError> {
        if case.bus_index(self.faulted_bus).is_none() {
            return Err(GridError::UnknownBus(self.faulted_bus));
        }
        if !(self.t_fault >= 0.0 && self.t_fault < self.t_clear) {
            return Err(GridError::InvalidFault(format!(
                "need 0 <= t_fault < t_clear, got {} and {}",
                self.t_fault, self.t_clear
            )));
        }
        if !(self.y_fault.re.is_finite() && self.y_fault.im.is_finite()) {
            return Err(GridError::InvalidFault("fault admittance must be finite".into()));
        }
        if let Some(id) = self.cleared_branch {
            let br = case.branch(id).ok_or(GridError::UnknownBranch(id))?;
            if !br.is_closed() {
                return Err(GridError::InvalidFault(format!("cleared branch {id} is already open")));
            }
        }
        Ok(())
    }
}

/// Ownership of branches and buses by region.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub branches: BTreeMap<BranchId, RegionId>,
    pub buses: BTreeMap<BusId, RegionId>,
}

impl Partition {
    /// Branch owned by its declared owner region; bus by its declared region.
    pub fn from_case(case: &GridCase) -> Self {
        Self {
            branches: default_partition(case),
            buses: default_bus_owner(case),
        }
    }

    pub fn regions(&self) -> BTreeSet<RegionId> {
        self.branches.values().chain(self.buses.values()).copied().collect()
    }
}


#[cfg(test)]
mod tests {
    use super::test_cases::*;
    use super::*;

    #[test]
    fn rejects_two_slacks() {
        let err = GridCase::new(
            100.0,
            60.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::Slack)],
            vec![line(1, 1, 2, 0.0, 0.1)],
            vec![],
        )
        .unwrap_err();
        assert_eq!(err, GridError::SlackCount(2));
    }

    #[test]
    fn rejects_islands_and_bad_branches() {
        let buses = vec![bus(1, BusKind::Slack), bus(2, BusKind::PQ), bus(3, BusKind::PQ)];
        let err = GridCase::new(100.0, 60.0, buses.clone(), vec![line(1, 1, 2, 0.0, 0.1)], vec![]);
        assert_eq!(err.unwrap_err(), GridError::Disconnected(2));

        let err = GridCase::new(100.0, 60.0, buses.clone(), vec![line(1, 1, 1, 0.0, 0.1)], vec![]);
        assert_eq!(err.unwrap_err(), GridError::SelfLoop(1, 1));

        let err = GridCase::new(100.0, 60.0, buses.clone(), vec![line(1, 1, 9, 0.0, 0.1)], vec![]);
        assert_eq!(err.unwrap_err(), GridError::UnknownBranchBus(1, 9));

        let err = GridCase::new(
            100.0,
            60.0,
            buses,
            vec![line(1, 1, 2, 0.0, 0.0), line(2, 2, 3, 0.0, 0.1)],
            vec![],
        );
        assert_eq!(err.unwrap_err(), GridError::DegenerateBranch(1));
    }

    #[test]
    fn fault_validation() {
        let case = triangle();
        assert!(FaultSpec::new(2, Some(1), 0.0, 0.1).validate(&case).is_ok());
        assert_eq!(
            FaultSpec::new(7, None, 0.0, 0.1).validate(&case).unwrap_err(),
            GridError::UnknownBus(7)
        );
        assert!(FaultSpec::new(2, None, 0.2, 0.1).validate(&case).is_err());
        let opened = case.with_branch_status(1, BranchStatus::Open).unwrap();
        assert!(FaultSpec::new(2, Some(1), 0.0, 0.1).validate(&opened).is_err());
    }
}
