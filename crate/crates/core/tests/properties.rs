use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softtree_lmc::checkpoint::{checkpoint_from_str, checkpoint_to_string, Meta};
use softtree_lmc::data::{Dataset, QuantileTransform};
use softtree_lmc::evaluation::interpolate;
use softtree_lmc::invariance::{adjust_tree, enumerate_ops};
use softtree_lmc::lap::{linear_sum_assignment, SimilarityMatrix};
use softtree_lmc::model::{
    ensemble_forward, leaf_flow, predict, tree_forward, ArchitectureSpec, EnsembleParams, TreeKind,
};
use softtree_lmc::oracle::{brute_force_lap, random_tree};
use softtree_lmc::training::gradients;

fn kind_strategy() -> impl Strategy<Value = TreeKind> {
    prop::sample::select(TreeKind::ALL.to_vec())
}

fn spec_strategy() -> impl Strategy<Value = ArchitectureSpec> {
    (kind_strategy(), 1usize..=3, 1usize..=4, 1usize..=4)
        .prop_map(|(kind, depth, features, classes)| ArchitectureSpec::new(kind, depth, 1, features, classes).unwrap())
}

fn ensemble(spec: ArchitectureSpec, trees: usize, seed: u64) -> EnsembleParams {
    let spec = ArchitectureSpec { trees, ..spec };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EnsembleParams {
        spec,
        trees: (0..trees).map(|_| random_tree(&spec, &mut rng, 1.0)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_op_preserves_the_tree_function(
        spec in spec_strategy(),
        seed in any::<u64>(),
        op_pick in any::<prop::sample::Index>(),
        x in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let tree = ensemble(spec, 1, seed).trees.remove(0);
        let ops = enumerate_ops(&spec).unwrap();
        let op = &ops[op_pick.index(ops.len())];
        let adjusted = adjust_tree(&tree, op, &spec).unwrap();
        let x = &x[..spec.features];
        for (a, b) in tree_forward(x, &tree, &spec).iter().zip(tree_forward(x, &adjusted, &spec)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_are_signed_permutations(spec in spec_strategy(), seed in any::<u64>(), op_pick in any::<prop::sample::Index>()) {
        let e = ensemble(spec, 2, seed);
        let ops = enumerate_ops(&spec).unwrap();
        let op = &ops[op_pick.index(ops.len())];
        let (a, b) = (&e.trees[0], &e.trees[1]);
        let (aa, bb) = (adjust_tree(a, op, &spec).unwrap(), adjust_tree(b, op, &spec).unwrap());
        prop_assert!((aa.dot(&bb) - a.dot(b)).abs() < 1e-12 * (1.0 + a.dot(b).abs()));
        let mut sorted_before: Vec<f64> = a.iter().map(|v| v.abs()).collect();
        let mut sorted_after: Vec<f64> = aa.iter().map(|v| v.abs()).collect();
        sorted_before.sort_by(f64::total_cmp);
        sorted_after.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_before, sorted_after);
    }

    #[test]
    fn identity_op_changes_nothing(spec in spec_strategy(), seed in any::<u64>()) {
        let tree = ensemble(spec, 1, seed).trees.remove(0);
        let ops = enumerate_ops(&spec).unwrap();
        prop_assert!(ops[0].is_identity());
        prop_assert_eq!(adjust_tree(&tree, &ops[0], &spec).unwrap(), tree);
    }

    #[test]
    fn leaf_flow_is_a_distribution(spec in spec_strategy(), seed in any::<u64>(), x in prop::collection::vec(-5.0f64..5.0, 4)) {
        let tree = ensemble(spec, 1, seed).trees.remove(0);
        let flow = leaf_flow(&x[..spec.features], &tree, &spec);
        prop_assert_eq!(flow.len(), spec.leaf_count());
        prop_assert!(flow.iter().all(|&f| (0.0..=1.0).contains(&f)));
        prop_assert!((flow.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tree_order_does_not_matter(spec in spec_strategy(), seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let e = ensemble(spec, 5, seed);
        let mut reversed = e.clone();
        reversed.trees.reverse();
        let x = &x[..spec.features];
        for (a, b) in ensemble_forward(x, &e).iter().zip(ensemble_forward(x, &reversed)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lap_matches_brute_force(n in 1usize..=6, values in prop::collection::vec(-10.0f64..10.0, 36), maximize in any::<bool>()) {
        let s = SimilarityMatrix::from_fn(n, n, |i, j| values[i * 6 + j]);
        let fast = linear_sum_assignment(&s, maximize).unwrap();
        let slow = brute_force_lap(&s, maximize).unwrap();
        let mut sorted = fast.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.objective(&fast), s.objective(&slow));
    }

    #[test]
    fn interpolation_hits_endpoints(spec in spec_strategy(), seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let a = ensemble(spec, 2, seed);
        let b = ensemble(spec, 2, seed.wrapping_add(1));
        prop_assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b.clone());
        let mid = interpolate(&a, &b, lambda).unwrap();
        for ((m, x), y) in mid.iter().zip(a.iter()).zip(b.iter()) {
            prop_assert!(*m >= x.min(*y) - 1e-12 && *m <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip_any_finite_value(spec in spec_strategy(), seed in any::<u64>(), special in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let mut e = ensemble(spec, 2, seed);
        e.trees[1].b[0] = special;
        let text = checkpoint_to_string(&e, &Meta::new()).unwrap();
        prop_assert_eq!(checkpoint_from_str(&text).unwrap().params, e);
    }

    #[test]
    fn quantile_transform_is_monotone(values in prop::collection::vec(-1e3f64..1e3, 2..60), probes in prop::collection::vec(-2e3f64..2e3, 10)) {
        let n = values.len();
        let train = Dataset::new(values, 1, vec![0; n], 1, vec!["x".into()], "prop").unwrap();
        let t = QuantileTransform::fit(&train);
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let mapped: Vec<f64> = probes.iter().map(|&v| t.features[0].transform(v)).collect();
        prop_assert!(mapped.iter().all(|v| v.is_finite()));
        prop_assert!(mapped.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn predictions_do_not_depend_on_row_partitioning(seed in any::<u64>(), split in 1usize..39) {
        let spec = ArchitectureSpec::new(TreeKind::NonOblivious, 2, 3, 3, 3).unwrap();
        let e = ensemble(spec, 3, seed);
        let data = softtree_lmc::data::synth_gaussian_blobs(40, 3, 3, 2.0, seed).unwrap();
        let whole = predict(&e, &data);
        let (left, right): (Vec<usize>, Vec<usize>) = ((0..split).collect(), (split..40).collect());
        let mut parts = predict(&e, &data.subset(&left).unwrap());
        parts.extend(predict(&e, &data.subset(&right).unwrap()));
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn gradients_are_linear_in_the_batch(seed in any::<u64>(), split in 1usize..150) {
        let spec = ArchitectureSpec::new(TreeKind::Oblivious, 2, 2, 3, 2).unwrap();
        let e = ensemble(spec, 2, seed);
        let data = softtree_lmc::data::synth_gaussian_blobs(150, 3, 2, 2.0, seed).unwrap();
        let rows: Vec<(&[f64], usize)> = (0..150).map(|i| (data.row(i), data.labels()[i])).collect();
        let whole = gradients(&e, &rows).unwrap();
        let (g1, g2) = (gradients(&e, &rows[..split]).unwrap(), gradients(&e, &rows[split..]).unwrap());
        let (w1, w2) = (split as f64 / 150.0, (150 - split) as f64 / 150.0);
        for ((g, a), b) in whole.iter().zip(g1.iter()).zip(g2.iter()) {
            prop_assert!((g - (w1 * a + w2 * b)).abs() < 1e-12);
        }
    }
}
