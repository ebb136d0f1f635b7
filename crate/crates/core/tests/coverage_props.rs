mod common;

use common::*;
use coverobs::coverage::{
    dimension_stats, merge, order_nodes, pareto_local_audit, solve, validate, CoverAssignment, Phase,
};
use coverobs::netgraph::{gen_random_pair, NetworkPair};
use proptest::prelude::*;

fn random_pair(n: usize, seed: u64) -> NetworkPair {
    let target = if n < 8 { 1.0 } else { 0.85 };
    gen_random_pair(n, 3.0, target, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solved_covers_pass_both_validators(n in 2usize..30, seed in 0u64..10_000) {
        let pair = random_pair(n, seed);
        let cover = solve(&pair);
        prop_assert!(validate(&cover, &pair).is_valid());
        prop_assert!(oracle_valid(&pair, &active_sets(&cover)));
    }

    /// Damaged covers: the validator and the oracle must agree on every one.
    #[test]
    fn validator_agrees_with_oracle(n in 3usize..16, seed in 0u64..10_000, pick in 0usize..1000, how in 0u8..3) {
        let pair = random_pair(n, seed);
        let mut sets = active_sets(&solve(&pair));
        let k = pick % sets.len();
        match how {
            0 => {
                sets.remove(k);
            }
            1 => {
                let len = sets[k].len();
                sets[k].remove(pick % len);
            }
            _ => {
                // Add an arbitrary extra node to one set.
                let v = pick % n;
                if !sets[k].contains(&v) {
                    sets[k].push(v);
                    sets[k].sort_unstable();
                }
            }
        }
        sets.retain(|s| !s.is_empty());
        let damaged = CoverAssignment::from_sets(n, sets.clone());
        prop_assert_eq!(validate(&damaged, &pair).is_valid(), oracle_valid(&pair, &sets));
    }

    #[test]
    fn solve_is_deterministic(n in 2usize..25, seed in 0u64..10_000) {
        let pair = random_pair(n, seed);
        prop_assert_eq!(active_sets(&solve(&pair)), active_sets(&solve(&pair)));
    }

    #[test]
    fn load_accounting_matches_raw_sets(n in 2usize..25, seed in 0u64..10_000) {
        let pair = random_pair(n, seed);
        let cover = solve(&pair);
        prop_assert_eq!(cover.total_load(), total_load(&active_sets(&cover)));
        let stats = dimension_stats(&cover, 2).unwrap();
        let loads = cover.loads();
        prop_assert_eq!(stats.max, 2 * loads.iter().copied().max().unwrap());
        prop_assert_eq!(stats.min, 2 * loads.iter().copied().min().unwrap());
        prop_assert!((stats.mean - 2.0 * loads.iter().sum::<usize>() as f64 / n as f64).abs() < 1e-12);
    }

    /// Establish: ascending |C|, descending |N|. Merge: descending |C|,
    /// descending |N|. Ties go to the smaller id.
    #[test]
    fn merge_order_matches_sort_oracle(n in 2usize..20, seed in 0u64..10_000) {
        let pair = random_pair(n, seed);
        let key = |i: usize| (pair.comm_neighbors(i).len(), pair.physical_neighbors(i).len());
        let mut establish: Vec<usize> = (0..n).collect();
        establish.sort_by(|&a, &b| {
            let (ca, na) = key(a);
            let (cb, nb) = key(b);
            ca.cmp(&cb).then(nb.cmp(&na)).then(a.cmp(&b))
        });
        let mut merge_order: Vec<usize> = (0..n).collect();
        merge_order.sort_by(|&a, &b| {
            let (ca, na) = key(a);
            let (cb, nb) = key(b);
            cb.cmp(&ca).then(nb.cmp(&na)).then(a.cmp(&b))
        });
        prop_assert_eq!(order_nodes(&pair, Phase::Establish), establish);
        prop_assert_eq!(order_nodes(&pair, Phase::Merge), merge_order);
    }
}

#[test]
fn six_node_fixture() {
    let pair = six_node();
    let cover = solve(&pair);
    assert!(validate(&cover, &pair).is_valid());
    let union = cover.union_of(2);
    for v in [0, 1, 3] {
        assert!(union.contains(&v), "node 3's sets miss node {}", v + 1);
    }
    assert!(oracle_valid(&pair, &active_sets(&cover)));
    let hand = cover_from(6, SIX_NODE_COVER);
    assert!(validate(&hand, &pair).is_valid());
}

#[test]
fn eight_node_fixture() {
    let pair = eight_node();
    assert_eq!(pair.shortest_path(0, 3).unwrap(), vec![0, 1, 2, 3]);
    let cover = solve(&pair);
    assert!(validate(&cover, &pair).is_valid());
    let hand = cover_from(8, EIGHT_NODE_COVER);
    assert!(validate(&hand, &pair).is_valid());
    assert!(pareto_local_audit(&hand, &pair).unwrap().pareto);
    let hand_total = hand.total_load() as f64;
    assert!(cover.total_load() as f64 <= 1.2 * hand_total, "{} vs {}", cover.total_load(), hand_total);
}

#[test]
fn star_merge_is_a_no_op() {
    let pair = NetworkPair::star(9).unwrap();
    let cover = solve(&pair);
    assert_eq!(active_sets(&merge(&cover, &pair)), active_sets(&cover));
}
