//! Forecast-error scenarios: Latin-hypercube draws reduced to a small
//! weighted representative set by k-means.
//!
//! Each load dimension draws from its own ChaCha8 stream selected by the
//! load's bus id, so sampling a subset of loads (one region) yields exactly
//! the corresponding coordinates of a system-wide draw with the same seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::grid::{BusId, GridCase};

pub const MIN_MULTIPLIER: f64 = 0.01;
pub const DEFAULT_TRUNCATION_SIGMAS: f64 = 3.0;
pub const MAX_KMEANS_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("invalid forecast spec: {0}")]
    InvalidSpec(String),
    #[error("need at least one sample")]
    NoSamples,
    #[error("k = {k} must be between 1 and the sample count {n}")]
    BadK { k: usize, n: usize },
    #[error("samples have inconsistent dimensions")]
    RaggedSamples,
    #[error("scenario has {got} multipliers, case has {expected} loads")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("scenario targets bus {0}, which carries no load")]
    NotALoad(BusId),
    #[error("regional scenario sets disagree on the raw sample count")]
    RawCountMismatch,
}

/// Relative forecast error of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum ErrorModel {
    /// Normal(0, σ) truncated at ±`trunc_sigmas`·σ.
    Gaussian { sigma: f64, trunc_sigmas: f64 },
    /// Uniform on [−a, a].
    Uniform { a: f64 },
}

impl ErrorModel {
    pub fn gaussian(sigma: f64) -> Self {
        Self::Gaussian {
            sigma,
            trunc_sigmas: DEFAULT_TRUNCATION_SIGMAS,
        }
    }

    fn validate(&self) -> Result<(), SamplingError> {
        match *self {
            Self::Gaussian { sigma, trunc_sigmas } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(SamplingError::InvalidSpec(format!(
                        "sigma must be positive, got {sigma}"
                    )));
                }
                if !(trunc_sigmas > 0.0 && trunc_sigmas.is_finite()) {
                    return Err(SamplingError::InvalidSpec(
                        "truncation bound must be finite and positive".into(),
                    ));
                }
            }
            // a = 0 is the zero-variance limit
            Self::Uniform { a } => {
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(SamplingError::InvalidSpec(format!(
                        "uniform half-width must be >= 0, got {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Maps a stratified uniform draw in (0, 1) to a relative error.
    fn quantile(&self, u: f64) -> f64 {
        match *self {
            Self::Gaussian { sigma, trunc_sigmas } => {
                let std = Normal::standard();
                let lo = std.cdf(-trunc_sigmas);
                let hi = std.cdf(trunc_sigmas);
                let p = (lo + u * (hi - lo)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                sigma * std.inverse_cdf(p).clamp(-trunc_sigmas, trunc_sigmas)
            }
            Self::Uniform { a } => a * (2.0 * u - 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadForecast {
    pub bus: BusId,
    pub model: ErrorModel,
}

/// Independent per-load error models, kept sorted by bus id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForecastSpec {
    pub loads: Vec<LoadForecast>,
}

impl ForecastSpec {
    pub fn new(mut loads: Vec<LoadForecast>) -> Result<Self, SamplingError> {
        loads.sort_by_key(|l| l.bus);
        let spec = Self { loads };
        spec.validate()?;
        Ok(spec)
    }

    /// Same model for every load bus of a case.
    pub fn uniform_for(case: &GridCase, model: ErrorModel) -> Result<Self, SamplingError> {
        Self::new(
            case.load_buses()
                .into_iter()
                .map(|bus| LoadForecast { bus, model })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        for w in self.loads.windows(2) {
            if w[0].bus >= w[1].bus {
                return Err(SamplingError::InvalidSpec(format!(
                    "bus {} listed twice or out of order",
                    w[1].bus
                )));
            }
        }
        self.loads.iter().try_for_each(|l| l.model.validate())
    }

    pub fn buses(&self) -> Vec<BusId> {
        self.loads.iter().map(|l| l.bus).collect()
    }

    /// Sets (or replaces) the model of one bus.
    pub fn set(&mut self, bus: BusId, model: ErrorModel) {
        match self.loads.binary_search_by_key(&bus, |l| l.bus) {
            Ok(i) => self.loads[i].model = model,
            Err(i) => self.loads.insert(i, LoadForecast { bus, model }),
        }
    }

    /// Restriction to the given buses.
    pub fn restrict(&self, buses: &[BusId]) -> Self {
        Self {
            loads: self.loads.iter().filter(|l| buses.contains(&l.bus)).copied().collect(),
        }
    }
}

/// One forecast-error realization: a load multiplier per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: usize,
    pub buses: Vec<BusId>,
    pub multipliers: Vec<f64>,
    /// Seed and sample index this scenario was drawn from.
    pub seed: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub representatives: Vec<Scenario>,
    pub weights: Vec<f64>,
    pub n_raw: usize,
    /// Representative index assigned to each raw sample.
    pub labels: Vec<usize>,
}

fn dimension_rng(seed: u64, bus: BusId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(bus));
    rng
}

pub fn draw_samples(spec: &ForecastSpec, n_raw: usize, seed: u64) -> Result<Vec<Scenario>, SamplingError> {
    spec.validate()?;
    if n_raw == 0 {
        return Err(SamplingError::NoSamples);
    }
    let dims: Vec<Vec<f64>> = spec
        .loads
        .iter()
        .map(|load| {
            let mut rng = dimension_rng(seed, load.bus);
            let mut strata: Vec<usize> = (0..n_raw).collect();
            strata.shuffle(&mut rng);
            strata
                .into_iter()
                .map(|s| {
                    let u = (s as f64 + rng.random::<f64>()) / n_raw as f64;
                    (1.0 + load.model.quantile(u)).max(MIN_MULTIPLIER)
                })
                .collect()
        })
        .collect();
    let buses = spec.buses();
    Ok((0..n_raw)
        .map(|i| Scenario {
            id: i,
            buses: buses.clone(),
            multipliers: dims.iter().map(|d| d[i]).collect(),
            seed,
            index: i,
        })
        .collect())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest point; ties go to the lowest index.
fn nearest<'a>(x: &[f64], points: impl Iterator<Item = &'a [f64]>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.enumerate() {
        let d = dist2(x, p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Reduces samples to at most `k` weighted representatives with k-means.
///
/// Centres start from a seeded random pick followed by greedy
/// farthest-point selection. Each representative is the sample nearest its
/// final centroid, weighted by cluster population; empty clusters are
/// dropped.
pub fn reduce_scenarios(samples: &[Scenario], k: usize, seed: u64) -> Result<ScenarioSet, SamplingError> {
    let n = samples.len();
    if n == 0 {
        return Err(SamplingError::NoSamples);
    }
    if k == 0 || k > n {
        return Err(SamplingError::BadK { k, n });
    }
    let dim = samples[0].multipliers.len();
    if samples.iter().any(|s| s.multipliers.len() != dim) {
        return Err(SamplingError::RaggedSamples);
    }
    let points: Vec<&[f64]> = samples.iter().map(|s| s.multipliers.as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut centres: Vec<Vec<f64>> = vec![points[first].to_vec()];
    let mut closest: Vec<f64> = points.iter().map(|p| dist2(p, points[first])).collect();
    while centres.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &d) in closest.iter().enumerate() {
            if d > best.0 {
                best = (d, i);
            }
        }
        let pick = points[best.1];
        for (c, p) in closest.iter_mut().zip(&points) {
            *c = c.min(dist2(p, pick));
        }
        centres.push(pick.to_vec());
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_KMEANS_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let l = nearest(p, centres.iter().map(Vec::as_slice));
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let mut representatives = Vec::new();
    let mut weights = Vec::new();
    let mut remap = vec![usize::MAX; k];
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let pick = members[nearest(&centres[c], members.iter().map(|&i| points[i]))];
        remap[c] = representatives.len();
        representatives.push(samples[pick].clone());
        weights.push(members.len() as f64 / n as f64);
    }
    Ok(ScenarioSet {
        representatives,
        weights,
        n_raw: n,
        labels: labels.into_iter().map(|l| remap[l]).collect(),
    })
}

/// Joins regional scenario sets drawn with a shared seed. Raw sample `i` is
/// rebuilt from each region's representative for that sample, and the
/// joined vectors are reduced again to at most `k` system-wide scenarios.
pub fn combine_regional(sets: &[ScenarioSet], k: usize, seed: u64) -> Result<ScenarioSet, SamplingError> {
    let n_raw = sets.first().map(|s| s.n_raw).ok_or(SamplingError::NoSamples)?;
    if sets.iter().any(|s| s.n_raw != n_raw || s.labels.len() != n_raw) {
        return Err(SamplingError::RawCountMismatch);
    }
    let mut order: Vec<(BusId, usize, usize)> = Vec::new();
    for (r, set) in sets.iter().enumerate() {
        if let Some(rep) = set.representatives.first() {
            for (d, &bus) in rep.buses.iter().enumerate() {
                order.push((bus, r, d));
            }
        }
    }
    order.sort_unstable();
    let buses: Vec<BusId> = order.iter().map(|o| o.0).collect();
    let joint: Vec<Scenario> = (0..n_raw)
        .map(|i| Scenario {
            id: i,
            buses: buses.clone(),
            multipliers: order
                .iter()
                .map(|&(_, r, d)| sets[r].representatives[sets[r].labels[i]].multipliers[d])
                .collect(),
            seed,
            index: i,
        })
        .collect();
    reduce_scenarios(&joint, k.min(n_raw), seed)
}

/// Scales every load by its multiplier and rebalances generation by the
/// ratio of new to old total active load.
pub fn apply_scenario(case: &GridCase, s: &Scenario) -> Result<GridCase, SamplingError> {
    let loads = case.load_buses();
    if s.multipliers.len() != loads.len() {
        return Err(SamplingError::DimensionMismatch {
            expected: loads.len(),
            got: s.multipliers.len(),
        });
    }
    if !s.buses.is_empty() {
        if let Some(&bad) = s.buses.iter().find(|b| !loads.contains(b)) {
            return Err(SamplingError::NotALoad(bad));
        }
    }
    let mut out = case.clone();
    let old_total: f64 = case.buses.iter().map(|b| b.p_load).sum();
    for (&bus, &mult) in loads.iter().zip(&s.multipliers) {
        if let Some(i) = out.bus_index(bus) {
            out.buses[i].p_load *= mult;
            out.buses[i].q_load *= mult;
        }
    }
    let new_total: f64 = out.buses.iter().map(|b| b.p_load).sum();
    if old_total != 0.0 {
        let ratio = new_total / old_total;
        for g in &mut out.generators {
            g.p_mech *= ratio;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(models: &[(BusId, ErrorModel)]) -> ForecastSpec {
        ForecastSpec::new(models.iter().map(|&(bus, model)| LoadForecast { bus, model }).collect()).unwrap()
    }

    fn scen(id: usize, m: &[f64]) -> Scenario {
        Scenario {
            id,
            buses: (0..m.len() as u32).collect(),
            multipliers: m.to_vec(),
            seed: 0,
            index: id,
        }
    }

    #[test]
    fn zero_width_uniform_gives_unit_multipliers() {
        let s = spec(&[(5, ErrorModel::Uniform { a: 0.0 }), (8, ErrorModel::Uniform { a: 0.0 })]);
        for sc in draw_samples(&s, 50, 9).unwrap() {
            assert_eq!(sc.multipliers, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn draws_are_deterministic_and_region_separable() {
        let full = spec(&[
            (5, ErrorModel::gaussian(0.05)),
            (6, ErrorModel::gaussian(0.1)),
            (8, ErrorModel::Uniform { a: 0.2 }),
        ]);
        let a = draw_samples(&full, 40, 77).unwrap();
        assert_eq!(a, draw_samples(&full, 40, 77).unwrap());
        assert_ne!(a, draw_samples(&full, 40, 78).unwrap());
        let part = draw_samples(&full.restrict(&[6]), 40, 77).unwrap();
        for (x, y) in a.iter().zip(&part) {
            assert_eq!(x.multipliers[1].to_bits(), y.multipliers[0].to_bits());
        }
    }

    #[test]
    fn latin_hypercube_hits_every_stratum() {
        let s = spec(&[(1, ErrorModel::Uniform { a: 0.5 })]);
        let n = 64;
        let mut seen = vec![false; n];
        for sc in draw_samples(&s, n, 3).unwrap() {
            let u = (sc.multipliers[0] - 0.5) / 1.0;
            seen[((u * n as f64).floor() as usize).min(n - 1)] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn gaussian_draws_are_truncated_and_floored() {
        let s = spec(&[(1, ErrorModel::gaussian(0.05))]);
        for sc in draw_samples(&s, 500, 1).unwrap() {
            assert!((sc.multipliers[0] - 1.0).abs() <= 0.15 + 1e-12);
        }
        let wide = spec(&[(1, ErrorModel::Uniform { a: 5.0 })]);
        assert!(draw_samples(&wide, 200, 1)
            .unwrap()
            .iter()
            .all(|s| s.multipliers[0] >= MIN_MULTIPLIER));
    }

    #[test]
    fn invalid_specs() {
        assert!(ForecastSpec::new(vec![LoadForecast {
            bus: 1,
            model: ErrorModel::gaussian(0.0)
        }])
        .is_err());
        assert!(ForecastSpec::new(vec![LoadForecast {
            bus: 1,
            model: ErrorModel::Uniform { a: -1.0 }
        }])
        .is_err());
        assert!(draw_samples(&ForecastSpec::default(), 0, 1).is_err());
    }

    #[test]
    fn k_equal_n_keeps_every_sample() {
        let samples: Vec<_> = (0..6).map(|i| scen(i, &[i as f64, (i * i) as f64])).collect();
        let set = reduce_scenarios(&samples, 6, 4).unwrap();
        let mut ids: Vec<_> = set.representatives.iter().map(|s| s.id).collect();
        ids.sort();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
        assert!(set.weights.iter().all(|&w| w == 1.0 / 6.0));
    }

    #[test]
    fn identical_samples_collapse() {
        let samples: Vec<_> = (0..10).map(|i| scen(i, &[1.02, 0.97])).collect();
        for k in [1, 3, 10] {
            let set = reduce_scenarios(&samples, k, 11).unwrap();
            assert_eq!(set.representatives.len(), 1);
            assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_k() {
        let samples: Vec<_> = (0..3).map(|i| scen(i, &[i as f64])).collect();
        assert_eq!(
            reduce_scenarios(&samples, 4, 0).unwrap_err(),
            SamplingError::BadK { k: 4, n: 3 }
        );
        assert!(reduce_scenarios(&samples, 0, 0).is_err());
    }

    /// Brute-force optimal 2-clustering by enumerating all bipartitions.
    fn best_bipartition(points: &[Vec<f64>]) -> (usize, usize) {
        let n = points.len();
        let sse = |idx: &[usize]| -> f64 {
            if idx.is_empty() {
                return 0.0;
            }
            let d = points[0].len();
            let mean: Vec<f64> = (0..d)
                .map(|k| idx.iter().map(|&i| points[i][k]).sum::<f64>() / idx.len() as f64)
                .collect();
            idx.iter().map(|&i| dist2(&points[i], &mean)).sum()
        };
        let mut best = (f64::INFINITY, 0, 0);
        for mask in 1u32..(1 << (n - 1)) {
            let a: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let b: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 0).collect();
            let cost = sse(&a) + sse(&b);
            if cost < best.0 {
                best = (cost, a.len(), b.len());
            }
        }
        (best.1.min(best.2), best.1.max(best.2))
    }

    #[test]
    fn two_blobs_match_bruteforce_split() {
        let mut pts = Vec::new();
        for i in 0..13 {
            pts.push(vec![0.9 + 0.004 * i as f64, 0.95 + 0.003 * (i % 4) as f64]);
        }
        for i in 0..7 {
            pts.push(vec![1.2 + 0.005 * i as f64, 1.1 - 0.002 * (i % 3) as f64]);
        }
        let samples: Vec<_> = pts.iter().enumerate().map(|(i, p)| scen(i, p)).collect();
        let (small, large) = best_bipartition(&pts);
        let set = reduce_scenarios(&samples, 2, 5).unwrap();
        let mut sizes: Vec<usize> = set.weights.iter().map(|w| (w * 20.0).round() as usize).collect();
        sizes.sort();
        assert!(sizes[0].abs_diff(small) <= 1 && sizes[1].abs_diff(large) <= 1);
        let blob_of = |s: &Scenario| s.multipliers[0] > 1.05;
        assert_ne!(blob_of(&set.representatives[0]), blob_of(&set.representatives[1]));
    }

    #[test]
    fn combine_regional_with_one_region_is_a_rereduction() {
        let s = spec(&[(5, ErrorModel::gaussian(0.05)), (6, ErrorModel::gaussian(0.05))]);
        let raw = draw_samples(&s, 30, 2).unwrap();
        let regional = reduce_scenarios(&raw, 30, 2).unwrap();
        let joint = combine_regional(&[regional], 5, 2).unwrap();
        let direct = reduce_scenarios(&raw, 5, 2).unwrap();
        assert_eq!(joint.weights, direct.weights);
        for (a, b) in joint.representatives.iter().zip(&direct.representatives) {
            assert_eq!(a.multipliers, b.multipliers);
        }
    }
}
