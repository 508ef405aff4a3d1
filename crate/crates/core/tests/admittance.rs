use std::collections::BTreeSet;

use edgegrid_core::cases::{random_case, random_partition};
use edgegrid_core::grid::{build_partial, build_ybus, merge_partials, BranchStatus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_partitions_merge_to_full_matrix_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n_bus = rng.random_range(5..=30);
        let k = rng.random_range(1..=5);
        let case = random_case(&mut rng, n_bus, k);
        let (partition, owners) = random_partition(&mut rng, &case, k);
        let parts: Vec<_> = (1..=k)
            .map(|r| build_partial(&case, r, &partition, &owners).unwrap())
            .collect();
        let merged = merge_partials(&parts, &case.closed_branch_ids()).unwrap();
        let full = build_ybus(&case).unwrap();
        assert!(merged.bitwise_eq(&full));
        assert!(full.is_structurally_symmetric());
        for (&(i, j), v) in &full.entries {
            assert_eq!(full.get(j, i), *v, "Y({i},{j}) != Y({j},{i})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_independent_of_part_order(seed in any::<u64>(), k in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, 12, k);
        let (partition, owners) = random_partition(&mut rng, &case, k);
        let mut parts: Vec<_> = (1..=k)
            .map(|r| build_partial(&case, r, &partition, &owners).unwrap())
            .collect();
        let expected = case.closed_branch_ids();
        let a = merge_partials(&parts, &expected).unwrap();
        parts.reverse();
        let b = merge_partials(&parts, &expected).unwrap();
        prop_assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn open_branch_status_invariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, 10, 2);
        let mut extra = case.clone();
        let mut br = case.branches[0].clone();
        br.id = 10_000;
        br.status = BranchStatus::Open;
        extra.branches.push(br);
        prop_assert!(build_ybus(&case).unwrap().bitwise_eq(&build_ybus(&extra).unwrap()));
    }
}

#[test]
fn case3_matches_hand_matrix() {
    let y = build_ybus(&edgegrid_core::cases::case3()).unwrap();
    let expected = [[-14.0, 10.0, 4.0], [10.0, -15.0, 5.0], [4.0, 5.0, -9.0]];
    for (i, row) in expected.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            assert_eq!(y.get(i, j).re, 0.0);
            assert!((y.get(i, j).im - b).abs() < 1e-12, "({i},{j})");
        }
    }
    let regions: BTreeSet<_> = edgegrid_core::cases::case3().regions();
    assert_eq!(regions, BTreeSet::from([1, 2]));
}
