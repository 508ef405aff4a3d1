//! Sparse admittance matrices and their regional partials.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{BranchId, BranchStatus, BusId, FaultSpec, GridCase, GridError, RegionId};
use crate::exact::ExactComplex;

type Entries<T> = BTreeMap<(usize, usize), T>;

/// Entries travel as `[row, col, value]` triples, since JSON object keys
/// must be strings.
mod triples {
    use super::Entries;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(m: &Entries<T>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter().map(|(&(i, j), v)| (i, j, v)))
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Entries<T>, D::Error> {
        let v: Vec<(usize, usize, T)> = Vec::deserialize(d)?;
        let n = v.len();
        let m: Entries<T> = v.into_iter().map(|(i, j, x)| ((i, j), x)).collect();
        if m.len() != n {
            return Err(serde::de::Error::custom("duplicate matrix entry"));
        }
        Ok(m)
    }
}

/// Sparse complex nodal admittance matrix, indexed by bus position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YMatrix {
    pub n: usize,
    #[serde(with = "triples")]
    pub entries: Entries<Complex64>,
}

impl YMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries.get(&(i, j)).copied().unwrap_or_default()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (&(i, j), &v) in &self.entries {
            m[(i, j)] = v;
        }
        m
    }

    /// Bit-for-bit equality of dimension, sparsity pattern and values.
    pub fn bitwise_eq(&self, other: &YMatrix) -> bool {
        self.n == other.n
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()
            })
    }

    pub fn is_structurally_symmetric(&self) -> bool {
        self.entries.keys().all(|&(i, j)| self.entries.contains_key(&(j, i)))
    }
}

/// One region's additive share of the full admittance matrix.
///
/// Entries are kept as exact expansions so that merging regions in any
/// grouping reproduces [`build_ybus`] bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialAdmittance {
    pub region: RegionId,
    pub n: usize,
    #[serde(with = "triples")]
    pub entries: Entries<ExactComplex>,
    pub branch_ids: BTreeSet<BranchId>,
}

impl PartialAdmittance {
    fn empty(region: RegionId, n: usize) -> Self {
        Self {
            region,
            n,
            entries: BTreeMap::new(),
            branch_ids: BTreeSet::new(),
        }
    }

    fn add(&mut self, i: usize, j: usize, v: Complex64) {
        self.entries.entry((i, j)).or_default().add(v);
    }

    /// Rounded view of this partial on its own.
    pub fn to_matrix(&self) -> YMatrix {
        YMatrix {
            n: self.n,
            entries: self.entries.iter().map(|(&k, v)| (k, v.value())).collect(),
        }
    }
}

fn stamp_branches(
    case: &GridCase,
    part: &mut PartialAdmittance,
    mut owned: impl FnMut(&super::Branch) -> bool,
) -> Result<(), GridError> {
    for br in case.branches.iter().filter(|b| b.is_closed() && owned(b)) {
        let y = br.series_admittance()?;
        let f = case
            .bus_index(br.from_bus)
            .ok_or(GridError::UnknownBranchBus(br.id, br.from_bus))?;
        let t = case
            .bus_index(br.to_bus)
            .ok_or(GridError::UnknownBranchBus(br.id, br.to_bus))?;
        let half_charge = Complex64::new(0.0, br.b_charge / 2.0);
        let off = -(y / br.tap);
        part.add(f, f, y / (br.tap * br.tap) + half_charge);
        part.add(t, t, y + half_charge);
        part.add(f, t, off);
        part.add(t, f, off);
        part.branch_ids.insert(br.id);
    }
    Ok(())
}

fn stamp_shunts(case: &GridCase, part: &mut PartialAdmittance, mut owned: impl FnMut(BusId) -> bool) {
    for (i, bus) in case.buses.iter().enumerate() {
        if owned(bus.id) && (bus.shunt_g != 0.0 || bus.shunt_b != 0.0) {
            part.add(i, i, Complex64::new(bus.shunt_g, bus.shunt_b));
        }
    }
}

/// Full admittance matrix of the case's closed branches and bus shunts.
pub fn build_ybus(case: &GridCase) -> Result<YMatrix, GridError> {
    let mut all = PartialAdmittance::empty(0, case.n_buses());
    stamp_branches(case, &mut all, |_| true)?;
    stamp_shunts(case, &mut all, |_| true);
    Ok(all.to_matrix())
}

/// Branch ownership declared in the case.
pub fn default_partition(case: &GridCase) -> BTreeMap<BranchId, RegionId> {
    case.branches.iter().map(|b| (b.id, b.owner_region)).collect()
}

pub fn default_bus_owner(case: &GridCase) -> BTreeMap<BusId, RegionId> {
    case.buses.iter().map(|b| (b.id, b.region)).collect()
}

/// Stamps the branches assigned to `region` (all four entries each) plus
/// the shunts of the buses it owns.
pub fn build_partial(
    case: &GridCase,
    region: RegionId,
    partition: &BTreeMap<BranchId, RegionId>,
    bus_owner: &BTreeMap<BusId, RegionId>,
) -> Result<PartialAdmittance, GridError> {
    let known = case.regions().contains(&region)
        || partition.values().any(|&r| r == region)
        || bus_owner.values().any(|&r| r == region);
    if !known {
        return Err(GridError::UnknownRegion(region));
    }
    if let Some(br) = case
        .branches
        .iter()
        .find(|b| b.is_closed() && !partition.contains_key(&b.id))
    {
        return Err(GridError::UnpartitionedBranch(br.id));
    }
    if let Some(bus) = case.buses.iter().find(|b| !bus_owner.contains_key(&b.id)) {
        return Err(GridError::UnownedBus(bus.id));
    }
    let mut part = PartialAdmittance::empty(region, case.n_buses());
    stamp_branches(case, &mut part, |b| partition[&b.id] == region)?;
    stamp_shunts(case, &mut part, |id| bus_owner[&id] == region);
    Ok(part)
}

/// [`build_partial`] under the ownership declared in the case itself.
pub fn build_partial_default(case: &GridCase, region: RegionId) -> Result<PartialAdmittance, GridError> {
    build_partial(case, region, &default_partition(case), &default_bus_owner(case))
}

/// Sums partials in ascending region order after checking that together
/// they stamp every expected branch exactly once.
pub fn merge_partials(
    parts: &[PartialAdmittance],
    expected_branches: &BTreeSet<BranchId>,
) -> Result<YMatrix, GridError> {
    let n = parts.first().map(|p| p.n).unwrap_or(0);
    let mut covered = BTreeSet::new();
    for p in parts {
        if p.n != n {
            return Err(GridError::DimensionMismatch(n, p.n));
        }
        for &b in &p.branch_ids {
            if !covered.insert(b) {
                return Err(GridError::DuplicateCoverage(b));
            }
        }
    }
    if &covered != expected_branches {
        return Err(GridError::IncompleteCoverage {
            missing: expected_branches.difference(&covered).copied().collect(),
            unexpected: covered.difference(expected_branches).copied().collect(),
        });
    }
    let mut ordered: Vec<&PartialAdmittance> = parts.iter().collect();
    ordered.sort_by_key(|p| p.region);
    let mut acc: Entries<ExactComplex> = BTreeMap::new();
    for p in ordered {
        for (&k, v) in &p.entries {
            acc.entry(k).or_default().absorb(v);
        }
    }
    Ok(YMatrix {
        n,
        entries: acc.into_iter().map(|(k, v)| (k, v.value())).collect(),
    })
}

/// Admittance matrices before, during and after a fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultVariants<T> {
    pub pre: T,
    pub on: T,
    pub post: T,
}

pub fn fault_variants(y: &YMatrix, case: &GridCase, fault: &FaultSpec) -> Result<FaultVariants<YMatrix>, GridError> {
    fault.validate(case)?;
    let f = case
        .bus_index(fault.faulted_bus)
        .ok_or(GridError::UnknownBus(fault.faulted_bus))?;
    let mut on = y.clone();
    *on.entries.entry((f, f)).or_default() += fault.y_fault;
    let post = match fault.cleared_branch {
        Some(id) => build_ybus(&case.with_branch_status(id, BranchStatus::Open)?)?,
        None => y.clone(),
    };
    Ok(FaultVariants {
        pre: y.clone(),
        on,
        post,
    })
}

impl FaultVariants<PartialAdmittance> {
    /// Regional partials for the three fault stages. The fault shunt is
    /// stamped by the region owning the faulted bus; the post-fault partial
    /// omits the cleared branch.
    pub fn for_region(
        case: &GridCase,
        region: RegionId,
        partition: &BTreeMap<BranchId, RegionId>,
        bus_owner: &BTreeMap<BusId, RegionId>,
        fault: &FaultSpec,
    ) -> Result<Self, GridError> {
        fault.validate(case)?;
        let pre = build_partial(case, region, partition, bus_owner)?;
        let mut on = pre.clone();
        if bus_owner.get(&fault.faulted_bus) == Some(&region) {
            let f = case
                .bus_index(fault.faulted_bus)
                .ok_or(GridError::UnknownBus(fault.faulted_bus))?;
            on.add(f, f, fault.y_fault);
        }
        let post = match fault.cleared_branch {
            Some(id) => build_partial(
                &case.with_branch_status(id, BranchStatus::Open)?,
                region,
                partition,
                bus_owner,
            )?,
            None => pre.clone(),
        };
        Ok(Self { pre, on, post })
    }
}

/// Expected branch coverage for each fault stage.
pub fn stage_branch_sets(case: &GridCase, fault: &FaultSpec) -> FaultVariants<BTreeSet<BranchId>> {
    let pre = case.closed_branch_ids();
    let mut post = pre.clone();
    if let Some(id) = fault.cleared_branch {
        post.remove(&id);
    }
    FaultVariants {
        on: pre.clone(),
        pre,
        post,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::test_cases::*;
    use crate::grid::{BusKind, GridCase};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_bus_reactance_hand_value() {
        let case = GridCase::new(
            100.0,
            60.0,
            vec![bus(1, BusKind::Slack), bus(2, BusKind::PQ)],
            vec![line(1, 1, 2, 0.0, 0.1)],
            vec![],
        )
        .unwrap();
        let y = build_ybus(&case).unwrap();
        assert_eq!(y.get(0, 0), c(0.0, -10.0));
        assert_eq!(y.get(1, 1), c(0.0, -10.0));
        assert_eq!(y.get(0, 1), c(0.0, 10.0));
        assert_eq!(y.get(1, 0), c(0.0, 10.0));
    }

    #[test]
    fn open_branches_contribute_nothing() {
        let mut case = triangle();
        for br in &mut case.branches {
            br.status = BranchStatus::Open;
        }
        let y = build_ybus(&case).unwrap();
        // only bus 3's shunt survives
        assert_eq!(y.entries.len(), 1);
        assert_eq!(y.get(2, 2), c(0.0, 0.05));

        case.buses[2].shunt_b = 0.0;
        assert!(build_ybus(&case).unwrap().entries.is_empty());
    }

    #[test]
    fn extra_open_branch_is_invisible() {
        let case = triangle();
        let mut extra = case.clone();
        let mut br = line(99, 1, 3, 0.3, 0.4);
        br.status = BranchStatus::Open;
        extra.branches.push(br);
        assert!(build_ybus(&case).unwrap().bitwise_eq(&build_ybus(&extra).unwrap()));
    }

    #[test]
    fn degenerate_branch_is_rejected() {
        let mut case = triangle();
        case.branches[0].r = 0.0;
        case.branches[0].x = 0.0;
        assert_eq!(build_ybus(&case).unwrap_err(), GridError::DegenerateBranch(1));
    }

    #[test]
    fn tap_stamp_follows_from_side_convention() {
        let case = triangle();
        let y = build_ybus(&case).unwrap();
        let br = &case.branches[1];
        let ys = br.series_admittance().unwrap();
        // branch 2 runs 2 -> 3 with tap 0.97; the off-diagonal is -y/tap
        assert_eq!(y.get(1, 2), -(ys / 0.97));
        assert_eq!(y.get(2, 1), -(ys / 0.97));
        assert!(y.is_structurally_symmetric());
    }

    #[test]
    fn single_region_partial_equals_full_matrix() {
        let case = triangle();
        let all_one: BTreeMap<_, _> = case.branches.iter().map(|b| (b.id, 1)).collect();
        let buses_one: BTreeMap<_, _> = case.buses.iter().map(|b| (b.id, 1)).collect();
        let p = build_partial(&case, 1, &all_one, &buses_one).unwrap();
        assert!(p.to_matrix().bitwise_eq(&build_ybus(&case).unwrap()));
    }

    #[test]
    fn triangle_split_sums_to_full_matrix() {
        let case = triangle();
        let full = build_ybus(&case).unwrap();
        let p1 = build_partial_default(&case, 1).unwrap();
        let p2 = build_partial_default(&case, 2).unwrap();
        assert_eq!(p1.branch_ids, BTreeSet::from([1, 2]));
        assert_eq!(p2.branch_ids, BTreeSet::from([3]));
        // brute-force oracle: plain entrywise addition of the rounded partials
        let (m1, m2) = (p1.to_matrix(), p2.to_matrix());
        for i in 0..3 {
            for j in 0..3 {
                let sum = m1.get(i, j) + m2.get(i, j);
                assert!((sum - full.get(i, j)).norm() < 1e-12, "entry ({i},{j})");
            }
        }
        let merged = merge_partials(&[p2, p1], &case.closed_branch_ids()).unwrap();
        assert!(merged.bitwise_eq(&full));
    }

    #[test]
    fn empty_region_yields_empty_partial() {
        let case = triangle();
        let mut partition = default_partition(&case);
        let owners = default_bus_owner(&case);
        partition.insert(3, 1);
        // region 2 still owns bus 3's shunt
        let p = build_partial(&case, 2, &partition, &owners).unwrap();
        assert!(p.branch_ids.is_empty());
        assert_eq!(p.entries.len(), 1);

        let mut owners = owners;
        owners.insert(3, 1);
        let p = build_partial(&case, 2, &partition, &owners).unwrap();
        assert!(p.entries.is_empty());
    }

    #[test]
    fn partial_errors() {
        let case = triangle();
        assert_eq!(
            build_partial_default(&case, 42).unwrap_err(),
            GridError::UnknownRegion(42)
        );
        let mut partition = default_partition(&case);
        partition.remove(&2);
        assert_eq!(
            build_partial(&case, 1, &partition, &default_bus_owner(&case)).unwrap_err(),
            GridError::UnpartitionedBranch(2)
        );
    }

    #[test]
    fn merge_rejects_duplicates_and_gaps() {
        let case = triangle();
        let p1 = build_partial_default(&case, 1).unwrap();
        let p2 = build_partial_default(&case, 2).unwrap();
        let expected = case.closed_branch_ids();

        let mut dup = p2.clone();
        dup.branch_ids.insert(2);
        assert_eq!(
            merge_partials(&[p1.clone(), dup], &expected).unwrap_err(),
            GridError::DuplicateCoverage(2)
        );
        assert_eq!(
            merge_partials(std::slice::from_ref(&p1), &expected).unwrap_err(),
            GridError::IncompleteCoverage {
                missing: vec![3],
                unexpected: vec![]
            }
        );
        let whole = merge_partials(std::slice::from_ref(&p1), &p1.branch_ids).unwrap();
        assert!(whole.bitwise_eq(&p1.to_matrix()));
    }

    #[test]
    fn fault_variants_definitions() {
        let case = triangle();
        let y = build_ybus(&case).unwrap();
        let fault = FaultSpec::new(2, Some(3), 0.0, 0.1);
        let v = fault_variants(&y, &case, &fault).unwrap();
        assert!(v.pre.bitwise_eq(&y));

        for (&k, &val) in &v.on.entries {
            if k == (1, 1) {
                let delta = val - y.get(1, 1);
                assert!((delta - fault.y_fault).norm() <= 1e-12 * fault.y_fault.norm());
            } else {
                assert_eq!(val.re.to_bits(), y.get(k.0, k.1).re.to_bits());
                assert_eq!(val.im.to_bits(), y.get(k.0, k.1).im.to_bits());
            }
        }

        let modified = case.with_branch_status(3, BranchStatus::Open).unwrap();
        assert!(v.post.bitwise_eq(&build_ybus(&modified).unwrap()));

        let again = fault_variants(&y, &case, &fault).unwrap();
        assert!(again.on.bitwise_eq(&v.on) && again.post.bitwise_eq(&v.post));

        let no_clear = fault_variants(&y, &case, &FaultSpec::new(2, None, 0.0, 0.1)).unwrap();
        assert!(no_clear.post.bitwise_eq(&y));

        assert!(fault_variants(&y, &case, &FaultSpec::new(8, None, 0.0, 0.1)).is_err());
    }

    #[test]
    fn regional_stage_partials_merge_to_stage_matrices() {
        let case = triangle();
        let fault = FaultSpec::new(3, Some(1), 0.0, 0.1);
        let (partition, owners) = (default_partition(&case), default_bus_owner(&case));
        let stages: Vec<_> = [1, 2]
            .iter()
            .map(|&r| FaultVariants::for_region(&case, r, &partition, &owners, &fault).unwrap())
            .collect();
        let sets = stage_branch_sets(&case, &fault);
        let post: Vec<_> = stages.iter().map(|s| s.post.clone()).collect();
        let on: Vec<_> = stages.iter().map(|s| s.on.clone()).collect();
        let merged_post = merge_partials(&post, &sets.post).unwrap();
        let merged_on = merge_partials(&on, &sets.on).unwrap();
        let reference = fault_variants(&build_ybus(&case).unwrap(), &case, &fault).unwrap();
        assert!(merged_post.bitwise_eq(&reference.post));
        for (k, v) in &reference.on.entries {
            assert!((merged_on.entries[k] - v).norm() <= 1e-9);
        }
    }

    #[test]
    fn zero_injection_rows_sum_to_zero() {
        let mut case = triangle();
        case.buses[2].shunt_b = 0.0;
        for br in &mut case.branches {
            br.b_charge = 0.0;
            br.tap = 1.0;
        }
        let y = build_ybus(&case).unwrap();
        for i in 0..3 {
            let row: Complex64 = (0..3).map(|j| y.get(i, j)).sum();
            assert!(row.norm() < 1e-12);
        }
    }
}
