use proptest::prelude::*;

use dualintent::corpus::{InteractionRecord, Scenario, QUERY_LEN};
use dualintent::metrics::{auc, build_trials, interacted_items, ndcg_at_k, rank_of, CUTOFF, NUM_CANDIDATES};
use dualintent::propagation::{combine_layers, propagate, Topology};
use dualintent::tensor::{Graph, Matrix};

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, NUM_CANDIDATES)
}

proptest! {
    #[test]
    fn rank_ignores_strictly_increasing_transforms(scores in scores_strategy(), shift in -3.0f64..3.0, scale in 0.1f64..4.0) {
        let candidates: Vec<usize> = (0..NUM_CANDIDATES).rev().collect();
        let moved: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp().ln_1p()).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let r = rank_of(&candidates, &scores);
        prop_assert!((1..=NUM_CANDIDATES).contains(&r));
        prop_assert_eq!(r, rank_of(&candidates, &cubed));
        // softplus can merge huge scores into ties; only compare when it does not
        let distinct = moved.iter().all(|m| m.is_finite());
        if distinct {
            let mut sorted = moved.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] < w[1]) {
                prop_assert_eq!(r, rank_of(&candidates, &moved));
            }
        }
    }

    #[test]
    fn ndcg_takes_only_discount_values(rank in 1usize..=NUM_CANDIDATES) {
        let v = ndcg_at_k(rank, CUTOFF).unwrap();
        let allowed: Vec<f64> = (1..=CUTOFF).map(|r| 1.0 / ((r + 1) as f64).log2()).chain([0.0]).collect();
        prop_assert!(allowed.contains(&v));
        prop_assert_eq!(v > 0.0, rank <= CUTOFF);
    }

    #[test]
    fn auc_counts_negatives_below(rank in 1usize..=NUM_CANDIDATES) {
        let a = auc(rank, NUM_CANDIDATES - 1).unwrap();
        prop_assert_eq!(a, (NUM_CANDIDATES - rank) as f64 / (NUM_CANDIDATES - 1) as f64);
        prop_assert!((a - (1.0 - (rank - 1) as f64 / (NUM_CANDIDATES - 1) as f64)).abs() < 1e-15);
    }

    #[test]
    fn propagation_ignores_edge_order(
        edges in prop::collection::vec((0usize..4, 0usize..5), 0..14),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mut rand_m = |r: usize| Matrix::from_shape_fn((r, d), |_| rng.random_range(-1.0..1.0));
        let u0 = rand_m(4);
        let i0 = rand_m(5);
        let q = rand_m(edges.len());

        let encode = |order: &[usize]| {
            let topo = Topology::new(4, 5, order.iter().map(|&e| edges[e]));
            let qp = Matrix::from_shape_fn((order.len(), d), |(r, c)| q[[order[r], c]]);
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(u0.clone()), g.constant(i0.clone()), g.constant(qp));
            let stack = propagate(&mut g, &topo, a, b, Some(c), 2).unwrap();
            let out = combine_layers(&mut g, &stack).unwrap();
            (g.value(out.users).clone(), g.value(out.items).clone())
        };
        let forward: Vec<usize> = (0..edges.len()).collect();
        let backward: Vec<usize> = forward.iter().rev().copied().collect();
        let (ua, ia) = encode(&forward);
        let (ub, ib) = encode(&backward);
        for (x, y) in ua.iter().zip(&ub).chain(ia.iter().zip(&ib)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn trials_have_one_positive_and_only_unseen_negatives() {
    let rec = |user, item, day| InteractionRecord {
        scenario: Scenario::Rec,
        user,
        item,
        day,
        terms: Vec::new(),
    };
    let train: Vec<_> = (0..30).map(|i| rec(i % 3, i * 7 % 250, 0)).collect();
    let test: Vec<_> = (0..12).map(|i| rec(i % 3, (i * 13 + 5) % 250, 7)).collect();
    let seen = interacted_items(3, &[&train, &test]);
    let trials = build_trials(&test, &seen, 250, 3);
    assert_eq!(trials.len(), test.len());
    for t in &trials {
        assert_eq!(t.candidates.len(), NUM_CANDIDATES);
        assert_eq!(t.shortfall, 0);
        assert_eq!(t.query, [0; QUERY_LEN]);
        assert_eq!(t.candidates.iter().filter(|&&c| c == t.positive()).count(), 1);
        for &c in &t.candidates[1..] {
            assert!(seen[t.user].binary_search(&c).is_err());
        }
    }
    assert_eq!(trials, build_trials(&test, &seen, 250, 3));
}
