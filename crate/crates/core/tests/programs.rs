use hyperspawn_core::engine::VirtualTime;
use hyperspawn_core::programs::{run_distribute, run_msort, ProgramConfig, Threshold};
use hyperspawn_core::topology::Hypercube;
use hyperspawn_core::{CostModel, SeqCostMode, Word};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(d: u32) -> ProgramConfig {
    ProgramConfig::new(Hypercube::uniform(d).unwrap())
}

#[test]
fn every_spawn_is_to_a_neighbour() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut spawns = 0;
    for d in 0..=6 {
        for chips in [false, true] {
            let topo = if chips && d >= 2 {
                Hypercube::new(d)
            } else {
                Hypercube::uniform(d)
            };
            let c = ProgramConfig::new(topo.unwrap());
            let r = run_distribute(&c).unwrap();
            assert_eq!(r.spawns.len(), (1usize << d) - 1);
            spawns += r.spawns.len();
            for _ in 0..3 {
                let n = rng.gen_range((1usize << d)..=512);
                let data: Vec<Word> = (0..n).map(|_| rng.gen()).collect();
                let r = run_msort(&c, data, Threshold::Auto).unwrap();
                assert!(r.sorted && r.permutation);
                spawns += r.spawns.len();
                for s in &r.spawns {
                    let x = s.guest.0 ^ s.host.0;
                    assert_eq!(x.count_ones(), 1);
                }
            }
        }
    }
    assert!(spawns > 500, "{spawns}");
}

#[test]
fn distribute_nodes_and_levels() {
    for d in 0..=6u32 {
        let r = run_distribute(&cfg(d)).unwrap();
        let p = 1u32 << d;
        let nodes: Vec<u32> = r.arrivals.iter().map(|a| a.node.0).collect();
        assert_eq!(nodes, (0..p).collect::<Vec<_>>());
        let model = CostModel::default();
        assert_eq!(r.time.as_ns() as f64, model.t_d(u64::from(p)).unwrap());
        for a in &r.arrivals {
            if a.level > 0 {
                assert_eq!(a.node.0 % (p >> a.level), 0);
            }
        }
        if d == 1 {
            assert_eq!(r.arrivals[1].arrival, VirtualTime::from_ns(18_460.0));
        }
    }
}

#[test]
fn simulated_sort_tracks_level_sum() {
    let model = CostModel::default();
    for d in 0..=6u32 {
        let p = 1u64 << d;
        for k in d..=10 {
            let n = 1usize << k;
            let data: Vec<Word> = (0..n as Word).rev().collect();
            let r = run_msort(&cfg(d), data, Threshold::Auto).unwrap();
            let want = model.t_snp_sum(n as u64, p, SeqCostMode::Closed).unwrap();
            assert_eq!(r.time.as_ns() as f64, want, "n={n} p={p}");
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let data: Vec<Word> = (0..1000).map(|i| (i * 7_919) % 613).collect();
    let run = || {
        let mut c = ProgramConfig::new(Hypercube::new(5).unwrap());
        c.keep_trace = true;
        let s = run_msort(&c, data.clone(), Threshold::Words(8)).unwrap();
        let d = run_distribute(&c).unwrap();
        (s.trace_hash, s.time, s.output, d.trace_hash, d.time)
    };
    assert_eq!(run(), run());
}

#[test]
fn recurrence_mode_leaves() {
    let mut c = cfg(2);
    c.seq_mode = SeqCostMode::Recurrence { base_ns: 0.0 };
    let data: Vec<Word> = (0..64).rev().collect();
    let r = run_msort(&c, data, Threshold::Words(64)).unwrap();
    assert_eq!(
        r.time.as_ns() as f64,
        CostModel::default().t_s1_recurrence(64, 0.0)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sorts_any_input(d in 0u32..=4, extra in 0usize..200, seed in any::<u64>(), t in 0usize..3) {
        let p = 1usize << d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p + extra;
        let data: Vec<Word> = (0..n).map(|_| rng.gen_range(0..50)).collect();
        let threshold = [Threshold::Auto, Threshold::Words(1), Threshold::Words(n)][t];
        let r = run_msort(&cfg(d), data, threshold).unwrap();
        prop_assert!(r.sorted);
        prop_assert!(r.permutation);
        if t == 2 {
            prop_assert!(r.spawns.is_empty());
        }
    }
}
