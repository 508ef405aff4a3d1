use edgegrid_core::cases::case9;
use edgegrid_core::powerflow::solve_power_flow;
use edgegrid_core::sampling::{
    apply_scenario, combine_regional, draw_samples, reduce_scenarios, ErrorModel, ForecastSpec, LoadForecast,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(n_loads: u32, sigma: f64) -> ForecastSpec {
    ForecastSpec::new(
        (1..=n_loads)
            .map(|bus| LoadForecast {
                bus,
                model: ErrorModel::gaussian(sigma),
            })
            .collect(),
    )
    .unwrap()
}

fn column(samples: &[edgegrid_core::sampling::Scenario], d: usize) -> Vec<f64> {
    samples.iter().map(|s| s.multipliers[d]).collect()
}

#[test]
fn gaussian_moments_match_at_ten_thousand() {
    let samples = draw_samples(&spec(3, 0.05), 10_000, 99).unwrap();
    // ±3σ truncation shrinks the std by about 1.4%, well inside the band
    for d in 0..3 {
        let xs = column(&samples, d);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((mean - 1.0).abs() <= 0.002, "mean {mean}");
        assert!((var.sqrt() - 0.05).abs() <= 0.003, "std {}", var.sqrt());
        assert!(xs.iter().all(|&x| (0.85 - 1e-12..=1.15 + 1e-12).contains(&x)));
    }
}

#[test]
fn latin_hypercube_fills_every_stratum() {
    let n = 500;
    let samples = draw_samples(
        &ForecastSpec::new(vec![LoadForecast {
            bus: 4,
            model: ErrorModel::Uniform { a: 0.1 },
        }])
        .unwrap(),
        n,
        5,
    )
    .unwrap();
    let mut hit = vec![0; n];
    for x in column(&samples, 0) {
        let u = (x - 0.9) / 0.2;
        hit[((u * n as f64) as usize).min(n - 1)] += 1;
    }
    assert!(hit.iter().all(|&h| h == 1));
}

#[test]
fn weighted_representatives_track_the_raw_mean() {
    let sigma = 0.05;
    for seed in 0..5 {
        let samples = draw_samples(&spec(3, sigma), 200, seed).unwrap();
        let set = reduce_scenarios(&samples, 10, seed).unwrap();
        assert!(set.representatives.len() <= 10);
        assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let bound = 2.0 * sigma / (200f64).sqrt();
        for d in 0..3 {
            let raw = column(&samples, d).iter().sum::<f64>() / 200.0;
            let rep: f64 = set
                .representatives
                .iter()
                .zip(&set.weights)
                .map(|(s, w)| w * s.multipliers[d])
                .sum();
            assert!((raw - rep).abs() <= bound, "seed {seed} dim {d}: {raw} vs {rep}");
        }
    }
}

#[test]
fn reduction_is_deterministic() {
    let samples = draw_samples(&spec(4, 0.08), 300, 11).unwrap();
    assert_eq!(samples, draw_samples(&spec(4, 0.08), 300, 11).unwrap());
    assert_eq!(
        reduce_scenarios(&samples, 7, 3).unwrap(),
        reduce_scenarios(&samples, 7, 3).unwrap()
    );
}

#[test]
fn regional_draws_are_slices_of_the_global_draw() {
    let global = spec(6, 0.05);
    let all = draw_samples(&global, 50, 8).unwrap();
    let part = draw_samples(&global.restrict(&[2, 5]), 50, 8).unwrap();
    for (a, p) in all.iter().zip(&part) {
        assert_eq!(p.multipliers, vec![a.multipliers[1], a.multipliers[4]]);
    }
}

#[test]
fn combining_singleton_regions_keeps_every_sample() {
    let global = spec(4, 0.05);
    let sets: Vec<_> = [vec![1, 2], vec![3, 4]]
        .iter()
        .map(|buses| {
            let s = draw_samples(&global.restrict(buses), 20, 1).unwrap();
            reduce_scenarios(&s, 20, 1).unwrap()
        })
        .collect();
    let combined = combine_regional(&sets, 20, 1).unwrap();
    let mut got: Vec<Vec<f64>> = combined.representatives.iter().map(|s| s.multipliers.clone()).collect();
    let mut want: Vec<Vec<f64>> = draw_samples(&global, 20, 1)
        .unwrap()
        .into_iter()
        .map(|s| s.multipliers)
        .collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
}

#[test]
fn nine_bus_scenarios_within_fifteen_percent_converge() {
    let case = case9();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let loads = case.load_buses();
    for _ in 0..100 {
        let mut s = draw_samples(
            &ForecastSpec::uniform_for(&case, ErrorModel::Uniform { a: 0.15 }).unwrap(),
            1,
            rng.random(),
        )
        .unwrap()
        .remove(0);
        // push some draws to the corners of the band
        for m in &mut s.multipliers {
            if rng.random_bool(0.3) {
                *m = if rng.random_bool(0.5) { 0.85 } else { 1.15 };
            }
        }
        assert_eq!(s.buses, loads);
        let scaled = apply_scenario(&case, &s).unwrap();
        solve_power_flow(&scaled, 1e-8, 20).unwrap();
    }
}
