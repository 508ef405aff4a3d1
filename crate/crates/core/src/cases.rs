//! Bundled fixtures and synthetic case generators.

use std::collections::BTreeMap;

use rand::Rng;

use crate::grid::{parse_case, Branch, BranchId, BranchStatus, Bus, BusKind, Generator, GridCase, RegionId};

pub const CASE3_TEXT: &str = include_str!("../../../fixtures/case3.txt");
pub const CASE9_TEXT: &str = include_str!("../../../fixtures/case9.txt");

pub fn case3() -> GridCase {
    parse_case(CASE3_TEXT).expect("bundled 3-bus case parses")
}

pub fn case9() -> GridCase {
    parse_case(CASE9_TEXT).expect("bundled 9-bus case parses")
}

/// Inertia given to the machine standing in for the infinite bus.
pub const INFINITE_BUS_INERTIA: f64 = 1e7;

#[derive(Debug, Clone, Copy)]
pub struct SmibParams {
    pub h: f64,
    pub d: f64,
    pub xd_p: f64,
    pub x_line: f64,
    pub p: f64,
    pub v_terminal: f64,
}

impl Default for SmibParams {
    fn default() -> Self {
        Self {
            h: 3.5,
            d: 0.0,
            xd_p: 0.3,
            x_line: 0.4,
            p: 0.9,
            v_terminal: 1.0,
        }
    }
}

/// Single machine against an infinite bus. Bus 1 is the slack at 1∠0 and
/// carries a machine with negligible reactance and huge inertia; the
/// studied machine (id 1) sits on PV bus 2, connected through a lossless line.
pub fn smib(params: SmibParams) -> GridCase {
    let bus = |id, kind, v_mag| Bus {
        id,
        kind,
        v_mag,
        v_ang: 0.0,
        p_load: 0.0,
        q_load: 0.0,
        shunt_g: 0.0,
        shunt_b: 0.0,
        region: 1,
    };
    GridCase::new(
        100.0,
        60.0,
        vec![bus(1, BusKind::Slack, 1.0), bus(2, BusKind::PV, params.v_terminal)],
        vec![Branch {
            id: 1,
            from_bus: 2,
            to_bus: 1,
            r: 0.0,
            x: params.x_line,
            b_charge: 0.0,
            tap: 1.0,
            status: BranchStatus::Closed,
            owner_region: 1,
        }],
        vec![
            Generator {
                id: 1,
                bus: 2,
                h: params.h,
                d: params.d,
                xd_p: params.xd_p,
                p_mech: params.p,
                e_mag: 1.0,
                delta0: 0.0,
            },
            Generator {
                id: 2,
                bus: 1,
                h: INFINITE_BUS_INERTIA,
                d: 0.0,
                xd_p: 1e-6,
                p_mech: -params.p,
                e_mag: 1.0,
                delta0: 0.0,
            },
        ],
    )
    .expect("SMIB case is valid")
}

/// Random connected case with `n_bus` buses spread over `n_regions` regions.
///
/// A random spanning tree of closed branches guarantees connectivity; extra
/// branches are added with random status. Generators sit on bus 1 (slack)
/// and a few PV buses; the remaining buses are PQ loads.
pub fn random_case(rng: &mut impl Rng, n_bus: usize, n_regions: u32) -> GridCase {
    assert!(n_bus >= 2 && n_regions >= 1);
    let n_gen = 1 + n_bus / 5;
    let buses: Vec<Bus> = (1..=n_bus as u32)
        .map(|id| {
            let kind = match id {
                1 => BusKind::Slack,
                i if (i as usize) <= n_gen => BusKind::PV,
                _ => BusKind::PQ,
            };
            let is_load = kind == BusKind::PQ && rng.random_bool(0.7);
            Bus {
                id,
                kind,
                v_mag: if kind == BusKind::PQ {
                    1.0
                } else {
                    rng.random_range(0.98..1.05)
                },
                v_ang: 0.0,
                p_load: if is_load { rng.random_range(0.05..0.6) } else { 0.0 },
                q_load: if is_load { rng.random_range(0.0..0.2) } else { 0.0 },
                shunt_g: if rng.random_bool(0.1) {
                    rng.random_range(0.0..0.02)
                } else {
                    0.0
                },
                shunt_b: if rng.random_bool(0.2) {
                    rng.random_range(-0.05..0.1)
                } else {
                    0.0
                },
                region: rng.random_range(1..=n_regions),
            }
        })
        .collect();

    let mut branches: Vec<Branch> = Vec::new();
    for i in 2..=n_bus as u32 {
        let parent = rng.random_range(1..i);
        let id = branches.len() as BranchId + 1;
        branches.push(random_branch(rng, id, parent, i, BranchStatus::Closed));
    }
    for _ in 0..n_bus / 2 {
        let a = rng.random_range(1..=n_bus as u32);
        let b = rng.random_range(1..=n_bus as u32);
        if a != b {
            let status = if rng.random_bool(0.2) {
                BranchStatus::Open
            } else {
                BranchStatus::Closed
            };
            let id = branches.len() as BranchId + 1;
            branches.push(random_branch(rng, id, a, b, status));
        }
    }
    let region_of: BTreeMap<u32, RegionId> = buses.iter().map(|b| (b.id, b.region)).collect();
    for br in &mut branches {
        br.owner_region = region_of[&br.from_bus];
    }

    let total_load: f64 = buses.iter().map(|b| b.p_load).sum();
    let generators = (1..=n_gen as u32)
        .map(|id| Generator {
            id,
            bus: id,
            h: rng.random_range(2.0..10.0),
            d: rng.random_range(0.0..2.0),
            xd_p: rng.random_range(0.1..0.3),
            p_mech: total_load / n_gen as f64,
            e_mag: 1.0,
            delta0: 0.0,
        })
        .collect();
    GridCase::new(100.0, 60.0, buses, branches, generators).expect("generated case is valid")
}

/// Random assignment of every branch and bus to one of `n_regions` regions.
pub fn random_partition(
    rng: &mut impl Rng,
    case: &GridCase,
    n_regions: u32,
) -> (BTreeMap<BranchId, RegionId>, BTreeMap<u32, RegionId>) {
    let branches = case
        .branches
        .iter()
        .map(|b| (b.id, rng.random_range(1..=n_regions)))
        .collect();
    let buses = case
        .buses
        .iter()
        .map(|b| (b.id, rng.random_range(1..=n_regions)))
        .collect();
    (branches, buses)
}

fn random_branch(rng: &mut impl Rng, id: BranchId, from: u32, to: u32, status: BranchStatus) -> Branch {
    let transformer = rng.random_bool(0.15);
    Branch {
        id,
        from_bus: from,
        to_bus: to,
        r: if transformer {
            0.0
        } else {
            rng.random_range(0.005..0.035)
        },
        x: rng.random_range(0.03..0.23),
        b_charge: if transformer { 0.0 } else { rng.random_range(0.0..0.3) },
        tap: if transformer { rng.random_range(0.95..1.05) } else { 1.0 },
        status,
        owner_region: 0,
    }
}
