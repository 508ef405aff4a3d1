use edgegrid_core::cases::{case9, smib, SmibParams};
use edgegrid_core::dynamics::{
    reduce_network, simulate_dynamics, simulate_from, ReducedNetwork, SimulationConfig, SimulationResult, Verdict,
};
use edgegrid_core::grid::{build_ybus, fault_variants, FaultSpec, GridCase};
use edgegrid_core::pipeline::simulate_case;
use edgegrid_core::powerflow::{initialize_machines, solve_power_flow};
use edgegrid_core::Complex64;
use rayon::prelude::*;

/// A fault that never happens within the simulated window.
fn no_fault(bus: u32) -> FaultSpec {
    let mut f = FaultSpec::new(bus, None, 100.0, 101.0);
    f.y_fault = Complex64::new(0.0, 0.0);
    f
}

fn prepared(case: &GridCase, fault: &FaultSpec) -> (GridCase, ReducedNetwork) {
    let sol = solve_power_flow(case, 1e-12, 20).unwrap();
    let init = initialize_machines(case, &sol).unwrap();
    let y = build_ybus(&init).unwrap();
    let stages = fault_variants(&y, &init, fault).unwrap();
    let net = reduce_network(&stages, &init, &sol).unwrap();
    (init, net)
}

fn max_drift(res: &SimulationResult) -> f64 {
    res.delta
        .iter()
        .flat_map(|d| d.iter().map(move |x| (x - d[0]).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn nine_bus_equilibrium_holds_for_five_seconds() {
    let res = simulate_case(&case9(), &no_fault(5), &SimulationConfig::new(60.0, 5.0)).unwrap();
    assert!(max_drift(&res) < 1e-6, "drift {}", max_drift(&res));
    assert_eq!(res.verdict, Verdict::Stable);
    assert_eq!(*res.times.last().unwrap(), 5.0);
}

#[test]
fn smib_equilibrium_holds() {
    let res = simulate_case(
        &smib(SmibParams::default()),
        &no_fault(2),
        &SimulationConfig::new(60.0, 5.0),
    )
    .unwrap();
    assert!(max_drift(&res) < 1e-6);
}

/// Analytic small-signal oracle: ωn = sqrt(ωs · Pmax · cos δ0 / (2H)).
#[test]
fn smib_small_signal_frequency() {
    let params = SmibParams::default();
    let case = smib(params);
    let fault = no_fault(2);
    let (init, net) = prepared(&case, &fault);
    let (m, inf) = (&init.generators[0], &init.generators[1]);
    let x_total = params.xd_p + params.x_line + inf.xd_p;
    let p_max = m.e_mag * inf.e_mag / x_total;
    let delta0 = m.delta0 - inf.delta0;
    let cfg = SimulationConfig::new(60.0, 5.0);
    let omega_n = (cfg.omega_s * p_max * delta0.cos() / (2.0 * params.h)).sqrt();

    let start = [m.delta0 + 0.01, inf.delta0];
    let res = simulate_from(&init, &net, &fault, &cfg, &start, &[0.0, 0.0]).unwrap();
    let rel: Vec<f64> = res.delta[0]
        .iter()
        .zip(&res.delta[1])
        .map(|(a, b)| a - b - delta0)
        .collect();
    let mut crossings = Vec::new();
    for k in 1..rel.len() {
        if rel[k - 1].signum() != rel[k].signum() {
            let frac = rel[k - 1] / (rel[k - 1] - rel[k]);
            crossings.push(res.times[k - 1] + frac * (res.times[k] - res.times[k - 1]));
        }
    }
    assert!(crossings.len() >= 4);
    let half_periods = (crossings.len() - 1) as f64;
    let measured = std::f64::consts::PI * half_periods / (crossings.last().unwrap() - crossings[0]);
    assert!(
        (measured / omega_n - 1.0).abs() < 0.02,
        "measured {measured}, analytic {omega_n}"
    );
}

#[test]
fn lossless_smib_conserves_energy() {
    let case = smib(SmibParams::default());
    let fault = no_fault(2);
    let (init, net) = prepared(&case, &fault);
    let cfg = SimulationConfig::new(60.0, 5.0);
    let start = [init.generators[0].delta0 + 0.3, init.generators[1].delta0];
    let res = simulate_from(&init, &net, &fault, &cfg, &start, &[0.0, 0.0]).unwrap();

    let b = net.pre.map(|z| z.im);
    assert!(net.pre.iter().all(|z| z.re.abs() < 1e-9));
    let e: Vec<f64> = init.generators.iter().map(|g| g.e_mag).collect();
    let energy = |k: usize| {
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for i in 0..2 {
            let g = &init.generators[i];
            kinetic += g.h * res.omega_dev[i][k].powi(2);
            potential -= g.p_mech * res.delta[i][k] / cfg.omega_s;
        }
        potential -= e[0] * e[1] * b[(0, 1)] * (res.delta[0][k] - res.delta[1][k]).cos() / cfg.omega_s;
        (kinetic, kinetic + potential)
    };
    let w0 = energy(0).1;
    let mut peak_kinetic: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..res.times.len() {
        let (ke, w) = energy(k);
        peak_kinetic = peak_kinetic.max(ke);
        worst = worst.max((w - w0).abs());
    }
    assert!(peak_kinetic > 0.0);
    assert!(
        worst <= 1e-3 * peak_kinetic,
        "energy drift {worst} vs swing {peak_kinetic}"
    );
}

#[test]
fn rk4_error_shrinks_fourth_order() {
    let case = smib(SmibParams::default());
    let fault = no_fault(2);
    let (init, net) = prepared(&case, &fault);
    let start = [init.generators[0].delta0 + 0.4, init.generators[1].delta0];
    let final_angle = |dt: f64| {
        let mut cfg = SimulationConfig::new(60.0, 1.0);
        cfg.dt = dt;
        let r = simulate_from(&init, &net, &fault, &cfg, &start, &[0.0, 0.0]).unwrap();
        r.delta[0].last().copied().unwrap() - r.delta[1].last().copied().unwrap()
    };
    let (a, b, c) = (final_angle(0.02), final_angle(0.01), final_angle(0.005));
    let ratio = (a - b).abs() / (b - c).abs();
    assert!(ratio >= 8.0, "error ratio {ratio}");
}

fn smib_clearing(t_clear: f64) -> SimulationResult {
    let fault = FaultSpec::new(2, None, 0.0, t_clear);
    simulate_case(&smib(SmibParams::default()), &fault, &SimulationConfig::new(60.0, 3.0)).unwrap()
}

#[test]
fn sustained_terminal_fault_loses_synchronism() {
    let res = smib_clearing(10.0);
    assert_eq!(res.verdict, Verdict::Unstable);
    assert!(res.t_unstable.unwrap() <= 2.0);
}

/// Equal-area oracle: with the terminal bolted, electrical output is zero
/// during the fault, so the critical clearing angle and time are closed form.
#[test]
fn clearing_time_threshold_matches_equal_area() {
    let params = SmibParams::default();
    let (init, _) = prepared(&smib(params), &no_fault(2));
    let (m, inf) = (&init.generators[0], &init.generators[1]);
    let p_max = m.e_mag * inf.e_mag / (params.xd_p + params.x_line + inf.xd_p);
    let d0 = m.delta0 - inf.delta0;
    let d_max = std::f64::consts::PI - d0;
    let pm = m.p_mech;
    let d_crit = ((pm * (d_max - d0) + p_max * d_max.cos()) / p_max).acos();
    let omega_s = 2.0 * std::f64::consts::PI * 60.0;
    let t_crit = (4.0 * params.h * (d_crit - d0) / (omega_s * pm)).sqrt();

    let below = (t_crit / 0.005).floor() * 0.005 - 0.01;
    let above = (t_crit / 0.005).ceil() * 0.005 + 0.01;
    assert_eq!(smib_clearing(below).verdict, Verdict::Stable, "t_crit = {t_crit}");
    assert_eq!(smib_clearing(above).verdict, Verdict::Unstable, "t_crit = {t_crit}");
}

#[test]
fn verdict_is_monotone_in_clearing_time() {
    let verdicts: Vec<Verdict> = (1..=10).map(|k| smib_clearing(0.05 * k as f64).verdict).collect();
    for w in verdicts.windows(2) {
        assert!(!(w[0] == Verdict::Unstable && w[1] == Verdict::Stable), "{verdicts:?}");
    }
    assert_eq!(verdicts[0], Verdict::Stable);
    assert_eq!(verdicts[9], Verdict::Unstable);
}

#[test]
fn concurrent_runs_are_bitwise_identical() {
    let case = case9();
    let clearing: Vec<f64> = (1..=12).map(|k| 0.02 * k as f64).collect();
    let run = |t: f64| {
        let fault = FaultSpec::new(7, Some(4), 0.1, 0.1 + t);
        simulate_case(&case, &fault, &SimulationConfig::new(60.0, 2.0)).unwrap()
    };
    let sequential: Vec<_> = clearing.iter().map(|&t| run(t)).collect();
    let parallel: Vec<_> = clearing.par_iter().map(|&t| run(t)).collect();
    for (a, b) in sequential.iter().zip(&parallel) {
        for (x, y) in a.delta.iter().flatten().zip(b.delta.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn trajectories_are_decimated() {
    let mut cfg = SimulationConfig::new(60.0, 60.0);
    cfg.dt = 0.005;
    let res = simulate_case(&smib(SmibParams::default()), &no_fault(2), &cfg).unwrap();
    assert!(res.times.len() <= 5000);
    assert_eq!(*res.times.last().unwrap(), 60.0);
    let csv = res.to_csv();
    assert!(csv.starts_with("time_s,delta_1,delta_2,omega_dev_1,omega_dev_2\n"));
    assert!(csv.ends_with("# verdict=Stable\n"));
}

#[test]
fn unaligned_clearing_time_errors() {
    let fault = FaultSpec::new(2, None, 0.0, 0.1234);
    assert!(simulate_case(&smib(SmibParams::default()), &fault, &SimulationConfig::new(60.0, 1.0)).is_err());
    let (init, net) = prepared(&smib(SmibParams::default()), &no_fault(2));
    assert!(simulate_dynamics(&init, &net, &fault, &SimulationConfig::new(60.0, 1.0)).is_err());
}
