//! Polar Newton–Raphson AC power flow and classical machine initialization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{build_ybus, BusId, BusKind, GridCase, GridError, YMatrix};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:e} p.u.)")]
    Divergence { iterations: usize, mismatch: f64 },
    #[error("power flow Jacobian is singular at iteration {0}")]
    SingularJacobian(usize),
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("admittance matrix has dimension {0}, case has {1} buses")]
    DimensionMismatch(usize, usize),
    #[error("generator {0} sits on bus {1} whose solved voltage is zero")]
    ZeroTerminalVoltage(u32, BusId),
    #[error("solution has {0} buses, case has {1}")]
    SolutionMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }
}

/// Net scheduled injections: generation at the bus minus its load.
fn scheduled(case: &GridCase) -> (Vec<f64>, Vec<f64>) {
    let mut p: Vec<f64> = case.buses.iter().map(|b| -b.p_load).collect();
    let q: Vec<f64> = case.buses.iter().map(|b| -b.q_load).collect();
    for g in &case.generators {
        if let Some(i) = case.bus_index(g.bus) {
            p[i] += g.p_mech;
        }
    }
    (p, q)
}

/// Complex power injected at every bus for the given voltages.
pub fn bus_injections(y: &YMatrix, v: &[Complex64]) -> Vec<Complex64> {
    let mut current = vec![Complex64::default(); v.len()];
    for (&(i, j), &yij) in &y.entries {
        current[i] += yij * v[j];
    }
    v.iter().zip(&current).map(|(vi, ii)| vi * ii.conj()).collect()
}

pub fn solve_power_flow(case: &GridCase, tol: f64, max_iter: usize) -> Result<PowerFlowSolution, PowerFlowError> {
    let y = build_ybus(case)?;
    solve_power_flow_with(case, &y, tol, max_iter)
}

/// Power flow over an externally supplied admittance matrix (e.g. one merged
/// from regional partials). Warm-starts from the case's stored voltages.
pub fn solve_power_flow_with(
    case: &GridCase,
    y: &YMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    if !(tol > 0.0) {
        return Err(PowerFlowError::BadTolerance);
    }
    let n = case.n_buses();
    if y.n != n {
        return Err(PowerFlowError::DimensionMismatch(y.n, n));
    }
    let (p_sched, q_sched) = scheduled(case);
    let mut vm: Vec<f64> = case.buses.iter().map(|b| b.v_mag).collect();
    let mut va: Vec<f64> = case.buses.iter().map(|b| b.v_ang).collect();

    // unknown angles: every non-slack bus; unknown magnitudes: PQ buses
    let ang_idx: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind != BusKind::Slack).collect();
    let mag_idx: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::PQ).collect();
    let (na, nm) = (ang_idx.len(), mag_idx.len());
    let dense = y.to_dense();
    let g = dense.map(|z| z.re);
    let b = dense.map(|z| z.im);

    let mut iterations = 0;
    loop {
        let v: Vec<Complex64> = vm.iter().zip(&va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
        let s = bus_injections(y, &v);
        let mut mismatch = DVector::zeros(na + nm);
        for (row, &i) in ang_idx.iter().enumerate() {
            mismatch[row] = s[i].re - p_sched[i];
        }
        for (row, &i) in mag_idx.iter().enumerate() {
            mismatch[na + row] = s[i].im - q_sched[i];
        }
        let worst = mismatch.iter().fold(
            0.0f64,
            |acc, m| if m.is_finite() { acc.max(m.abs()) } else { f64::INFINITY },
        );
        if worst < tol {
            return Ok(PowerFlowSolution {
                v_mag: vm,
                v_ang: va,
                iterations,
                max_mismatch: worst,
            });
        }
        if iterations >= max_iter || !worst.is_finite() {
            return Err(PowerFlowError::Divergence {
                iterations,
                mismatch: worst,
            });
        }

        let mut jac = DMatrix::zeros(na + nm, na + nm);
        // column lookup for the unknowns
        let mut ang_col = vec![usize::MAX; n];
        let mut mag_col = vec![usize::MAX; n];
        for (c, &i) in ang_idx.iter().enumerate() {
            ang_col[i] = c;
        }
        for (c, &i) in mag_idx.iter().enumerate() {
            mag_col[i] = na + c;
        }
        for i in 0..n {
            let (pi, qi, vi) = (s[i].re, s[i].im, vm[i]);
            let (gii, bii) = (g[(i, i)], b[(i, i)]);
            if ang_col[i] != usize::MAX {
                let p_row = ang_col[i];
                jac[(p_row, ang_col[i])] = -qi - bii * vi * vi;
                if mag_col[i] != usize::MAX {
                    jac[(p_row, mag_col[i])] = pi / vi + gii * vi;
                }
            }
            if mag_col[i] != usize::MAX {
                let q_row = mag_col[i];
                jac[(q_row, ang_col[i])] = pi - gii * vi * vi;
                jac[(q_row, mag_col[i])] = qi / vi - bii * vi;
            }
        }
        for &(i, j) in y.entries.keys().filter(|(i, j)| i != j) {
            let (p_row, q_row) = (ang_col[i], mag_col[i]);
            if p_row == usize::MAX {
                continue;
            }
            let (gij, bij) = (g[(i, j)], b[(i, j)]);
            let (sin, cos) = (va[i] - va[j]).sin_cos();
            let a = gij * sin - bij * cos;
            let c = gij * cos + bij * sin;
            if ang_col[j] != usize::MAX {
                jac[(p_row, ang_col[j])] = vm[i] * vm[j] * a;
            }
            if mag_col[j] != usize::MAX {
                jac[(p_row, mag_col[j])] = vm[i] * c;
            }
            if q_row != usize::MAX {
                if ang_col[j] != usize::MAX {
                    jac[(q_row, ang_col[j])] = -vm[i] * vm[j] * c;
                }
                if mag_col[j] != usize::MAX {
                    jac[(q_row, mag_col[j])] = vm[i] * a;
                }
            }
        }

        let step = jac
            .lu()
            .solve(&(-&mismatch))
            .filter(|dx| dx.iter().all(|x| x.is_finite()))
            .ok_or(PowerFlowError::SingularJacobian(iterations))?;
        for (c, &i) in ang_idx.iter().enumerate() {
            va[i] += step[c];
        }
        for (c, &i) in mag_idx.iter().enumerate() {
            vm[i] += step[na + c];
        }
        iterations += 1;
        if vm.iter().any(|&m| !(m > 0.0)) {
            return Err(PowerFlowError::Divergence {
                iterations,
                mismatch: worst,
            });
        }
    }
}

/// Computes each generator's internal EMF behind its transient reactance
/// from the solved terminal conditions and sets `p_mech` to its electrical
/// output, so the classical model starts at equilibrium. The solved bus
/// voltages are written back into the case.
pub fn initialize_machines(case: &GridCase, sol: &PowerFlowSolution) -> Result<GridCase, PowerFlowError> {
    let y = build_ybus(case)?;
    initialize_machines_with(case, &y, sol)
}

pub fn initialize_machines_with(
    case: &GridCase,
    y: &YMatrix,
    sol: &PowerFlowSolution,
) -> Result<GridCase, PowerFlowError> {
    let n = case.n_buses();
    if sol.v_mag.len() != n || sol.v_ang.len() != n {
        return Err(PowerFlowError::SolutionMismatch(sol.v_mag.len(), n));
    }
    if y.n != n {
        return Err(PowerFlowError::DimensionMismatch(y.n, n));
    }
    let v = sol.voltages();
    let s_inj = bus_injections(y, &v);
    let mut out = case.clone();
    for (bus, (&m, &a)) in out.buses.iter_mut().zip(sol.v_mag.iter().zip(&sol.v_ang)) {
        bus.v_mag = m;
        bus.v_ang = a;
    }

    for i in 0..n {
        let bus = &case.buses[i];
        let at_bus: Vec<usize> = (0..case.generators.len())
            .filter(|&k| case.generators[k].bus == bus.id)
            .collect();
        if at_bus.is_empty() {
            continue;
        }
        if !(sol.v_mag[i] > 0.0) {
            return Err(PowerFlowError::ZeroTerminalVoltage(
                case.generators[at_bus[0]].id,
                bus.id,
            ));
        }
        let s_gen = s_inj[i] + Complex64::new(bus.p_load, bus.q_load);
        // P shared in proportion to scheduled output, Q equally
        let p_total: f64 = at_bus.iter().map(|&k| case.generators[k].p_mech).sum();
        let count = at_bus.len() as f64;
        for &k in &at_bus {
            let share = if p_total != 0.0 {
                case.generators[k].p_mech / p_total
            } else {
                1.0 / count
            };
            let s_k = Complex64::new(s_gen.re * share, s_gen.im / count);
            let current = (s_k / v[i]).conj();
            let emf = v[i] + Complex64::new(0.0, case.generators[k].xd_p) * current;
            let g = &mut out.generators[k];
            g.e_mag = emf.norm();
            g.delta0 = emf.arg();
            g.p_mech = (emf * current.conj()).re;
        }
    }
    Ok(out)
}

/// Case whose stored operating point is the given solution.
pub fn with_solution(case: &GridCase, sol: &PowerFlowSolution) -> GridCase {
    let mut out = case.clone();
    for (bus, (&m, &a)) in out.buses.iter_mut().zip(sol.v_mag.iter().zip(&sol.v_ang)) {
        bus.v_mag = m;
        bus.v_ang = a;
    }
    out
}
