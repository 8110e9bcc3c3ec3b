use std::collections::BTreeSet;

use hyperspawn_core::topology::{Hypercube, LinkCosts, NodeId};
use proptest::prelude::*;

#[test]
fn edge_counts() {
    for d in 0..=10 {
        let h = Hypercube::uniform(d).unwrap();
        let listed = h.edges().count() as u64;
        let by_degree: u64 = h
            .nodes()
            .map(|n| h.neighbours(n).unwrap().len() as u64)
            .sum::<u64>()
            / 2;
        assert_eq!(h.edge_count(), listed);
        assert_eq!(listed, by_degree);
        assert_eq!(listed, u64::from(d) * (1u64 << d) / 2);
    }
}

#[test]
fn bad_configurations() {
    assert!(Hypercube::new(17).is_err());
    assert!(Hypercube::with_chip_dims(4, BTreeSet::from([4]), LinkCosts::default()).is_err());
    assert!(Hypercube::dimension_for(12).is_err());
    assert_eq!(Hypercube::dimension_for(64).unwrap(), 6);
    let h = Hypercube::uniform(3).unwrap();
    assert!(h.hop_distance(NodeId(0), NodeId(8)).is_err());
}

proptest! {
    #[test]
    fn adjacency_is_one_bit(d in 1u32..=10, a in any::<u32>(), b in any::<u32>()) {
        let h = Hypercube::uniform(d).unwrap();
        let (a, b) = (NodeId(a % h.node_count()), NodeId(b % h.node_count()));
        let x = a.0 ^ b.0;
        prop_assert_eq!(h.adjacent(a, b).unwrap(), x != 0 && x & (x - 1) == 0);
        prop_assert_eq!(h.adjacent(a, b).unwrap(), h.adjacent(b, a).unwrap());
        prop_assert_eq!(h.hop_distance(a, b).unwrap(), x.count_ones());
    }

    #[test]
    fn uniform_path_cost_is_hop_count(d in 0u32..=10, a in any::<u32>(), b in any::<u32>()) {
        let h = Hypercube::uniform(d).unwrap();
        let (a, b) = (NodeId(a % h.node_count()), NodeId(b % h.node_count()));
        prop_assert_eq!(h.path_multiplier(a, b).unwrap(), f64::from(h.hop_distance(a, b).unwrap()));
    }

    #[test]
    fn path_cost_sums_hops(d in 2u32..=10, a in any::<u32>(), b in any::<u32>(), on in 0.1f64..1.0) {
        let h = Hypercube::with_chip_dims(d, Hypercube::default_chip_dims(d), LinkCosts::with_on_chip(on).unwrap()).unwrap();
        let (a, b) = (NodeId(a % h.node_count()), NodeId(b % h.node_count()));
        let x = a.0 ^ b.0;
        let high = (x >> (d - 2)).count_ones();
        let expect = f64::from(high) * on + f64::from(x.count_ones() - high);
        prop_assert!((h.path_multiplier(a, b).unwrap() - expect).abs() < 1e-12);
        prop_assert_eq!(h.path_multiplier(a, b).unwrap(), h.path_multiplier(b, a).unwrap());
    }
}
