//! Randomized invariants over small family members.

use proptest::prelude::*;
use treemix::graph::Adjacency;
use treemix::hitting::hitting_moments;
use treemix::lumping::{coarsest_lumpable_partition, quotient_chain};
use treemix::mixing::WorstCaseProfile;
use treemix::montecarlo::{sample_hitting_time, MCConfig};
use treemix::{build_family_tree, ChainOperator, LevelSchedule, TreeFamilySpec, TreeMode};

fn small_spec() -> impl Strategy<Value = TreeFamilySpec> {
    (1u32..=3, 2u64..=3, any::<bool>(), any::<bool>(), 1u32..=2).prop_filter_map("too large", |(k, base, perfect, loops, alpha)| {
        let mut spec = TreeFamilySpec::geometric(k, base).with_leaf_self_loops(loops);
        spec.alpha.num = alpha + 1;
        if !perfect {
            spec = spec.with_mode(TreeMode::ExactSize);
        }
        let n = spec.mass().ok()?;
        (n <= 800).then_some(spec)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chain_is_stochastic_and_reversible(spec in small_spec()) {
        let g = build_family_tree(&spec).unwrap();
        let chain = ChainOperator::lazy(&g).unwrap();
        prop_assert!(chain.row_sum_defect() < 1e-14);
        prop_assert!(chain.reversibility_defect() < 1e-15);
        let pi = chain.stationary_distribution().unwrap();
        prop_assert!((pi.total_mass() - 1.0).abs() < 1e-12);
        let stepped = chain.step(&pi).unwrap();
        prop_assert!(stepped.max_abs_diff(&pi).unwrap() < 1e-15);
        prop_assert_eq!(g.vertex_count_u64(), g.closed_form_vertex_count());
    }

    #[test]
    fn hitting_means_solve_first_step_equations(spec in small_spec()) {
        let g = build_family_tree(&spec).unwrap();
        let chain = ChainOperator::lazy(&g).unwrap();
        let m = hitting_moments(&chain, &[0]).unwrap();
        prop_assert_eq!(m.mean_at(0), 0.0);
        for x in 1..g.vertex_count() {
            let mut expected = 1.0;
            chain.for_each_transition(x, |y, p| expected += p * m.mean_at(y));
            prop_assert!((expected - m.mean_at(x)).abs() <= 1e-9 * m.mean_at(x));
        }
    }

    #[test]
    fn distance_to_stationarity_is_non_increasing(spec in small_spec(), t0 in 0u64..400) {
        prop_assume!(spec.mode == TreeMode::Perfect);
        let g = build_family_tree(&spec).unwrap();
        let chain = ChainOperator::lazy(&g).unwrap();
        let profile = WorstCaseProfile::from_quotients(&chain, &g.canonical_starts()).unwrap();
        let (a, b) = (profile.distance(t0), profile.distance(t0 + 1));
        prop_assert!(b <= a + 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn quotient_preserves_stationary_mass(spec in small_spec()) {
        prop_assume!(spec.mode == TreeMode::Perfect);
        let g = build_family_tree(&spec).unwrap();
        let chain = ChainOperator::lazy(&g).unwrap();
        for v in g.canonical_starts() {
            let q = quotient_chain(&chain, coarsest_lumpable_partition(&chain, v).unwrap()).unwrap();
            prop_assert!((q.pi().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(q.row_sum_defect() < 1e-13);
            prop_assert!(q.reversibility_defect() < 1e-15);
        }
    }

    #[test]
    fn simulated_steps_decompose(spec in small_spec(), seed in any::<u64>()) {
        let g = build_family_tree(&spec).unwrap();
        let chain = ChainOperator::lazy(&g).unwrap();
        let stats = sample_hitting_time(&chain, g.path_len() as usize, 0, &MCConfig::new(seed, 20)).unwrap();
        prop_assert_eq!(stats.identity_violations, 0);
        prop_assert!(stats.samples.iter().all(|s| s.identities_hold()));
    }
}

#[test]
fn schedules_produce_expected_levels() {
    assert_eq!(TreeFamilySpec::canonical(3).levels().unwrap(), vec![(2, 16), (3, 256)]);
    let spec = TreeFamilySpec::geometric(5, 4);
    assert_eq!(spec.schedule, LevelSchedule::Geometric { base: 4 });
    assert_eq!(spec.levels().unwrap().last(), Some(&(5, 1024)));
    assert_eq!(spec.mass().unwrap(), 1 << 30);
}
