//! Classical-model transient stability over the Kron-reduced network.
//!
//! Each machine is a constant EMF behind its transient reactance; loads are
//! constant impedances at the pre-disturbance operating point. Rotor
//! dynamics per machine, with speed deviation `w` in per-unit:
//!
//! ```text
//! dδ/dt = ωs · w
//! 2H · dw/dt = Pm − Pe − D · w
//! Pe_i = Σ_j E_i E_j (G_ij cos(δ_i − δ_j) + B_ij sin(δ_i − δ_j))
//! ```
//!
//! integrated with fixed-step RK4, switching the reduced admittance at the
//! fault and clearing instants.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{reciprocal, FaultSpec, FaultVariants, GenId, GridCase, GridError, YMatrix};
use crate::powerflow::PowerFlowSolution;

pub const DEFAULT_DT: f64 = 0.005;
pub const MAX_DT: f64 = 0.02;
pub const MAX_TRAJECTORY_POINTS: usize = 5000;
const SWITCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("matrix to eliminate is singular")]
    Singular,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("switching time {time} s is not a multiple of dt = {dt} s")]
    MisalignedSwitch { time: f64, dt: f64 },
    #[error("state became non-finite at t = {0} s")]
    NumericBlowup(f64),
    #[error("reduced network is {got}x{got}, case has {expected} machines")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("solution covers {0} buses, case has {1}")]
    SolutionMismatch(usize, usize),
    #[error("no scenario results to assess")]
    EmptyAssessment,
    #[error("scenario weights must be non-negative with a positive total")]
    BadWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Synchronous speed in rad/s.
    pub omega_s: f64,
    /// Rotor-angle spread, relative to the centre of inertia, that marks
    /// loss of synchronism.
    pub angle_threshold: f64,
}

impl SimulationConfig {
    pub fn new(freq_hz: f64, t_end: f64) -> Self {
        Self {
            dt: DEFAULT_DT,
            t_end,
            omega_s: 2.0 * std::f64::consts::PI * freq_hz,
            angle_threshold: std::f64::consts::PI,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(DynamicsError::InvalidConfig(format!(
                "dt must be in (0, {MAX_DT}], got {}",
                self.dt
            )));
        }
        if !(self.t_end > 0.0) {
            return Err(DynamicsError::InvalidConfig("t_end must be positive".into()));
        }
        if !(self.omega_s > 0.0 && self.angle_threshold > 0.0) {
            return Err(DynamicsError::InvalidConfig(
                "omega_s and angle_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Reduced admittance among generator internal nodes for each fault stage.
pub type ReducedNetwork = FaultVariants<DMatrix<Complex64>>;

/// Eliminates every node not listed in `keep`:
/// `Y_red = Y_kk − Y_ke · Y_ee⁻¹ · Y_ek`.
pub fn kron_eliminate(y: &DMatrix<Complex64>, keep: &[usize]) -> Result<DMatrix<Complex64>, DynamicsError> {
    let n = y.nrows();
    let elim: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    let y_kk = y.select_rows(keep).select_columns(keep);
    if elim.is_empty() {
        return Ok(y_kk);
    }
    let y_ee = y.select_rows(&elim).select_columns(&elim);
    let y_ek = y.select_rows(&elim).select_columns(keep);
    let y_ke = y.select_rows(keep).select_columns(&elim);
    let x = y_ee.lu().solve(&y_ek).ok_or(DynamicsError::Singular)?;
    if x.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(DynamicsError::Singular);
    }
    Ok(y_kk - y_ke * x)
}

/// Reduces a bus admittance matrix to the generator internal nodes. Loads
/// become shunts `(p − jq)/|V|²` at the solved voltages and each machine is
/// attached through `1/(j·xd')`.
pub fn kron_reduce(y: &YMatrix, case: &GridCase, sol: &PowerFlowSolution) -> Result<DMatrix<Complex64>, DynamicsError> {
    let n = case.n_buses();
    if y.n != n {
        return Err(DynamicsError::DimensionMismatch { expected: n, got: y.n });
    }
    if sol.v_mag.len() != n {
        return Err(DynamicsError::SolutionMismatch(sol.v_mag.len(), n));
    }
    let m = case.generators.len();
    let mut aug = DMatrix::<Complex64>::zeros(n + m, n + m);
    for (&(i, j), &v) in &y.entries {
        aug[(i, j)] = v;
    }
    for (i, bus) in case.buses.iter().enumerate() {
        if bus.has_load() {
            let v2 = sol.v_mag[i] * sol.v_mag[i];
            aug[(i, i)] += Complex64::new(bus.p_load, -bus.q_load) / v2;
        }
    }
    for (k, g) in case.generators.iter().enumerate() {
        let b = case.bus_index(g.bus).ok_or(GridError::UnknownBus(g.bus))?;
        let link = reciprocal(Complex64::new(0.0, g.xd_p));
        let node = n + k;
        aug[(node, node)] += link;
        aug[(b, b)] += link;
        aug[(node, b)] -= link;
        aug[(b, node)] -= link;
    }
    let keep: Vec<usize> = (n..n + m).collect();
    kron_eliminate(&aug, &keep)
}

pub fn reduce_network(
    stages: &FaultVariants<YMatrix>,
    case: &GridCase,
    sol: &PowerFlowSolution,
) -> Result<ReducedNetwork, DynamicsError> {
    Ok(FaultVariants {
        pre: kron_reduce(&stages.pre, case, sol)?,
        on: kron_reduce(&stages.on, case, sol)?,
        post: kron_reduce(&stages.post, case, sol)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub gen_ids: Vec<GenId>,
    pub times: Vec<f64>,
    /// Rotor angle per machine per stored step, radians.
    pub delta: Vec<Vec<f64>>,
    /// Speed deviation per machine per stored step, per-unit.
    pub omega_dev: Vec<Vec<f64>>,
    pub verdict: Verdict,
    pub t_unstable: Option<f64>,
}

impl SimulationResult {
    /// Trajectory as CSV: `time_s, delta_<gen>..., omega_dev_<gen>...`,
    /// followed by a `# verdict=...` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s");
        for id in &self.gen_ids {
            let _ = write!(out, ",delta_{id}");
        }
        for id in &self.gen_ids {
            let _ = write!(out, ",omega_dev_{id}");
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t:?}");
            for series in self.delta.iter().chain(&self.omega_dev) {
                let _ = write!(out, ",{:?}", series[k]);
            }
            out.push('\n');
        }
        match (self.verdict, self.t_unstable) {
            (Verdict::Unstable, Some(t)) => {
                let _ = writeln!(out, "# verdict=Unstable t_unstable={t:?}");
            }
            _ => out.push_str("# verdict=Stable\n"),
        }
        out
    }
}

fn step_index(time: f64, dt: f64) -> Result<usize, DynamicsError> {
    let k = (time / dt).round();
    if (k * dt - time).abs() > SWITCH_TOLERANCE {
        return Err(DynamicsError::MisalignedSwitch { time, dt });
    }
    Ok(k as usize)
}

struct Machines {
    e: Vec<f64>,
    pm: Vec<f64>,
    two_h: Vec<f64>,
    d: Vec<f64>,
}

/// Row-major conductance and susceptance of one stage.
struct Stage {
    g: Vec<f64>,
    b: Vec<f64>,
}

impl Stage {
    fn new(y: &DMatrix<Complex64>) -> Self {
        let m = y.nrows();
        let mut g = Vec::with_capacity(m * m);
        let mut b = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                g.push(y[(i, j)].re);
                b.push(y[(i, j)].im);
            }
        }
        Self { g, b }
    }
}

fn derivative(
    mach: &Machines,
    stage: &Stage,
    omega_s: f64,
    delta: &[f64],
    omega: &[f64],
    d_delta: &mut [f64],
    d_omega: &mut [f64],
) {
    let m = delta.len();
    for i in 0..m {
        let mut pe = 0.0;
        for j in 0..m {
            let (sin, cos) = (delta[i] - delta[j]).sin_cos();
            pe += mach.e[i] * mach.e[j] * (stage.g[i * m + j] * cos + stage.b[i * m + j] * sin);
        }
        d_delta[i] = omega_s * omega[i];
        d_omega[i] = (mach.pm[i] - pe - mach.d[i] * omega[i]) / mach.two_h[i];
    }
}

/// Rotor-angle spread about the centre of inertia.
pub fn coi_spread(delta: &[f64], h: &[f64]) -> f64 {
    let total: f64 = h.iter().sum();
    let coi = delta.iter().zip(h).map(|(d, h)| d * h).sum::<f64>() / total;
    let (lo, hi) = delta
        .iter()
        .map(|d| d - coi)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if delta.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Simulates from the initialized equilibrium (`delta0`, zero speed deviation).
pub fn simulate_dynamics(
    case: &GridCase,
    net: &ReducedNetwork,
    fault: &FaultSpec,
    cfg: &SimulationConfig,
) -> Result<SimulationResult, DynamicsError> {
    let delta0: Vec<f64> = case.generators.iter().map(|g| g.delta0).collect();
    let omega0 = vec![0.0; delta0.len()];
    simulate_from(case, net, fault, cfg, &delta0, &omega0)
}

/// Simulates from an arbitrary initial rotor state.
pub fn simulate_from(
    case: &GridCase,
    net: &ReducedNetwork,
    fault: &FaultSpec,
    cfg: &SimulationConfig,
    delta0: &[f64],
    omega0: &[f64],
) -> Result<SimulationResult, DynamicsError> {
    cfg.validate()?;
    let m = case.generators.len();
    for mat in [&net.pre, &net.on, &net.post] {
        if mat.nrows() != m || mat.ncols() != m {
            return Err(DynamicsError::DimensionMismatch {
                expected: m,
                got: mat.nrows(),
            });
        }
    }
    if delta0.len() != m || omega0.len() != m {
        return Err(DynamicsError::DimensionMismatch {
            expected: m,
            got: delta0.len(),
        });
    }
    if !(fault.t_fault >= 0.0 && fault.t_fault < fault.t_clear) {
        return Err(GridError::InvalidFault("need 0 <= t_fault < t_clear".into()).into());
    }
    let dt = cfg.dt;
    let k_fault = step_index(fault.t_fault, dt)?;
    let k_clear = step_index(fault.t_clear, dt)?;
    let n_steps = (cfg.t_end / dt - SWITCH_TOLERANCE).ceil().max(1.0) as usize;
    let stride = (n_steps + 1).div_ceil(MAX_TRAJECTORY_POINTS).max(1);

    let mach = Machines {
        e: case.generators.iter().map(|g| g.e_mag).collect(),
        pm: case.generators.iter().map(|g| g.p_mech).collect(),
        two_h: case.generators.iter().map(|g| 2.0 * g.h).collect(),
        d: case.generators.iter().map(|g| g.d).collect(),
    };
    let h: Vec<f64> = case.generators.iter().map(|g| g.h).collect();
    let stages = [Stage::new(&net.pre), Stage::new(&net.on), Stage::new(&net.post)];

    let mut delta = delta0.to_vec();
    let mut omega = omega0.to_vec();
    let stored = n_steps / stride + 2;
    let mut times = Vec::with_capacity(stored);
    let mut delta_hist: Vec<Vec<f64>> = vec![Vec::with_capacity(stored); m];
    let mut omega_hist: Vec<Vec<f64>> = vec![Vec::with_capacity(stored); m];
    let mut record = |t: f64, delta: &[f64], omega: &[f64]| {
        times.push(t);
        for i in 0..m {
            delta_hist[i].push(delta[i]);
            omega_hist[i].push(omega[i]);
        }
    };
    record(0.0, &delta, &omega);

    let mut t_unstable = (coi_spread(&delta, &h) > cfg.angle_threshold).then_some(0.0);
    let mut k1 = (vec![0.0; m], vec![0.0; m]);
    let mut k2 = (vec![0.0; m], vec![0.0; m]);
    let mut k3 = (vec![0.0; m], vec![0.0; m]);
    let mut k4 = (vec![0.0; m], vec![0.0; m]);
    let mut tmp_d = vec![0.0; m];
    let mut tmp_w = vec![0.0; m];

    for k in 0..n_steps {
        let stage = if k < k_fault {
            &stages[0]
        } else if k < k_clear {
            &stages[1]
        } else {
            &stages[2]
        };
        let ws = cfg.omega_s;
        derivative(&mach, stage, ws, &delta, &omega, &mut k1.0, &mut k1.1);
        for i in 0..m {
            tmp_d[i] = delta[i] + 0.5 * dt * k1.0[i];
            tmp_w[i] = omega[i] + 0.5 * dt * k1.1[i];
        }
        derivative(&mach, stage, ws, &tmp_d, &tmp_w, &mut k2.0, &mut k2.1);
        for i in 0..m {
            tmp_d[i] = delta[i] + 0.5 * dt * k2.0[i];
            tmp_w[i] = omega[i] + 0.5 * dt * k2.1[i];
        }
        derivative(&mach, stage, ws, &tmp_d, &tmp_w, &mut k3.0, &mut k3.1);
        for i in 0..m {
            tmp_d[i] = delta[i] + dt * k3.0[i];
            tmp_w[i] = omega[i] + dt * k3.1[i];
        }
        derivative(&mach, stage, ws, &tmp_d, &tmp_w, &mut k4.0, &mut k4.1);
        for i in 0..m {
            delta[i] += dt / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
            omega[i] += dt / 6.0 * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i]);
        }
        let t = (k + 1) as f64 * dt;
        if delta.iter().chain(&omega).any(|x| !x.is_finite()) {
            return Err(DynamicsError::NumericBlowup(t));
        }
        if t_unstable.is_none() && coi_spread(&delta, &h) > cfg.angle_threshold {
            t_unstable = Some(t);
        }
        if (k + 1) % stride == 0 || k + 1 == n_steps {
            record(t, &delta, &omega);
        }
    }

    Ok(SimulationResult {
        gen_ids: case.generators.iter().map(|g| g.id).collect(),
        times,
        delta: delta_hist,
        omega_dev: omega_hist,
        verdict: if t_unstable.is_some() {
            Verdict::Unstable
        } else {
            Verdict::Stable
        },
        t_unstable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioVerdict {
    pub index: usize,
    pub weight: f64,
    pub verdict: Verdict,
    pub t_unstable: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityReport {
    /// Weighted share of scenarios that lose synchronism.
    pub insecurity_probability: f64,
    pub scenarios: Vec<ScenarioVerdict>,
}

pub fn assess_run(results: &[(f64, &SimulationResult)]) -> Result<SecurityReport, DynamicsError> {
    if results.is_empty() {
        return Err(DynamicsError::EmptyAssessment);
    }
    if results.iter().any(|(w, _)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(DynamicsError::BadWeights);
    }
    let total: f64 = results.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return Err(DynamicsError::BadWeights);
    }
    let unstable: f64 = results
        .iter()
        .filter(|(_, r)| r.verdict == Verdict::Unstable)
        .map(|(w, _)| w)
        .sum();
    Ok(SecurityReport {
        insecurity_probability: unstable / total,
        scenarios: results
            .iter()
            .enumerate()
            .map(|(index, (w, r))| ScenarioVerdict {
                index,
                weight: *w,
                verdict: r.verdict,
                t_unstable: r.t_unstable,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn nothing_to_eliminate_returns_kept_block() {
        let y = DMatrix::from_row_slice(2, 2, &[c(1.0, -5.0), c(0.0, 5.0), c(0.0, 5.0), c(0.5, -6.0)]);
        let red = kron_eliminate(&y, &[0, 1]).unwrap();
        assert_eq!(red, y);
    }

    #[test]
    fn two_node_reduction_hand_algebra() {
        let (y11, y12, y21, y22) = (c(0.2, -8.0), c(-0.1, 4.0), c(-0.1, 4.0), c(1.3, -9.5));
        let y = DMatrix::from_row_slice(2, 2, &[y11, y12, y21, y22]);
        let red = kron_eliminate(&y, &[0]).unwrap();
        let expected = y11 - y12 * y21 / y22;
        assert!((red[(0, 0)] - expected).norm() < 1e-14);
    }

    #[test]
    fn isolated_zero_admittance_bus_is_singular() {
        let y = DMatrix::from_row_slice(
            3,
            3,
            &[
                c(0.0, -5.0),
                c(0.0, 5.0),
                c(0.0, 0.0),
                c(0.0, 5.0),
                c(0.0, -5.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
            ],
        );
        assert_eq!(kron_eliminate(&y, &[0, 1]).unwrap_err(), DynamicsError::Singular);
    }

    #[test]
    fn config_bounds() {
        let mut cfg = SimulationConfig::new(60.0, 1.0);
        assert!(cfg.validate().is_ok());
        cfg.dt = 0.05;
        assert!(cfg.validate().is_err());
        cfg.dt = 0.01;
        cfg.t_end = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn coi_spread_is_reference_free() {
        let h = [1.0, 3.0, 2.0];
        let a = coi_spread(&[0.1, 0.5, -0.2], &h);
        let b = coi_spread(&[10.1, 10.5, 9.8], &h);
        assert!((a - 0.7).abs() < 1e-12 && (b - 0.7).abs() < 1e-12);
    }

    fn dummy(verdict: Verdict) -> SimulationResult {
        SimulationResult {
            gen_ids: vec![],
            times: vec![0.0],
            delta: vec![],
            omega_dev: vec![],
            verdict,
            t_unstable: (verdict == Verdict::Unstable).then_some(0.5),
        }
    }

    #[test]
    fn assessment_arithmetic() {
        let (s, u) = (dummy(Verdict::Stable), dummy(Verdict::Unstable));
        assert_eq!(assess_run(&[(0.5, &s), (0.5, &s)]).unwrap().insecurity_probability, 0.0);
        assert_eq!(assess_run(&[(0.2, &u), (0.8, &u)]).unwrap().insecurity_probability, 1.0);
        let mixed = assess_run(&[(0.7, &s), (0.3, &u)]).unwrap();
        assert!((mixed.insecurity_probability - 0.3).abs() < 1e-15);
        assert_eq!(mixed.scenarios.len(), 2);
        assert_eq!(assess_run(&[]).unwrap_err(), DynamicsError::EmptyAssessment);
        assert_eq!(assess_run(&[(-0.1, &s)]).unwrap_err(), DynamicsError::BadWeights);
    }

    #[test]
    fn misaligned_switch_is_rejected() {
        assert_eq!(step_index(0.1, 0.005).unwrap(), 20);
        assert!(step_index(0.1013, 0.005).is_err());
    }
}
