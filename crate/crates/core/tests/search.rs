mod common;

use pgcs_brm::brm::{search_path, search_path_with_heuristic, SearchOutcome};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn search_matches_enumeration(seed in 0u64..100_000, n in 2usize..=8, p in 0.1f64..0.8, alpha in 0.0f64..1.0, dag in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, p, dag);
        let best = enumerate_best(&g, 0, n - 1, alpha);
        match search_path(&g, 0, n - 1, alpha).unwrap() {
            SearchOutcome::Found(path) => {
                prop_assert_eq!(Some(path.cost), best);
                prop_assert_eq!(path.nodes.first(), Some(&0));
                prop_assert_eq!(path.nodes.last(), Some(&(n - 1)));
                let summed: f64 = path.edges.iter().fold(0.0, |acc, &k| acc + g.edges[k].cost.total(alpha));
                prop_assert_eq!(summed, path.cost);
            }
            SearchOutcome::NotFound { .. } => prop_assert!(best.is_none()),
        }
    }

    #[test]
    fn zero_heuristic_is_uniform_cost(seed in 0u64..100_000, n in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.5, false);
        let a = search_path(&g, 0, n - 1, 0.3).unwrap();
        let b = search_path_with_heuristic(&g, 0, n - 1, 0.3, 0.0).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn negative_cycle_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = random_graph(&mut rng, 3, 1.0, false);
    for e in &mut g.edges {
        e.cost.control = 0.0;
        e.cost.hinge = 0.0;
        e.cost.entropy = -1.0;
    }
    assert!(search_path(&g, 0, 2, 0.5).is_err());
}
