use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softtree_lmc::data::synth_gaussian_blobs;
use softtree_lmc::evaluation::{barrier, lambda_grid};
use softtree_lmc::invariance::{adjust_tree, enumerate_ops, op_count, InvarianceOp};
use softtree_lmc::lap::{linear_sum_assignment, SimilarityMatrix};
use softtree_lmc::matching::{activation_matching, apply_alignment, weight_matching, Alignment};
use softtree_lmc::model::{ensemble_forward, tree_forward, ArchitectureSpec, EnsembleParams, TreeKind, TreeParams};
use softtree_lmc::oracle::{
    brute_force_lap, equivalence_sweep, equivalence_sweep_with, expand_oblivious, expansion_check, gradient_check,
    lap_cross_check, random_tree, reference_tree_forward,
};

fn spec(kind: TreeKind, depth: usize, trees: usize) -> ArchitectureSpec {
    ArchitectureSpec::new(kind, depth, trees, 4, 3).unwrap()
}

#[test]
fn equivalence_sweeps_pass_for_every_architecture() {
    for kind in TreeKind::ALL {
        for depth in 1..=3 {
            let report = equivalence_sweep(&spec(kind, depth, 1), 10, depth as u64).unwrap();
            assert!(report.passed(), "{report}");
            assert!(report.max_deviation < 1e-12);
            assert_eq!(report.cases as u128, 10 * op_count(&spec(kind, depth, 1)));
        }
    }
}

#[test]
fn op_counts_match_closed_forms() {
    let counts = |kind| (1..=3).map(|d| op_count(&spec(kind, d, 1))).collect::<Vec<_>>();
    assert_eq!(counts(TreeKind::NonOblivious), vec![2, 8, 128]);
    assert_eq!(counts(TreeKind::Oblivious), vec![2, 8, 48]);
    assert_eq!(counts(TreeKind::DecisionList), vec![2, 2, 2]);
    assert_eq!(counts(TreeKind::ModifiedDecisionList), vec![1, 1, 1]);
}

fn sign_bug(tree: &TreeParams, op: &InvarianceOp, spec: &ArchitectureSpec) -> softtree_lmc::Result<TreeParams> {
    let mut adjusted = adjust_tree(tree, op, spec)?;
    if !op.is_identity() {
        // forgets to negate the root bias
        adjusted.b[0] = -adjusted.b[0];
    }
    Ok(adjusted)
}

#[test]
fn injected_sign_bug_is_detected() {
    for kind in [TreeKind::NonOblivious, TreeKind::Oblivious, TreeKind::DecisionList] {
        let report = equivalence_sweep_with(&spec(kind, 2, 1), 10, 3, 1e-12, sign_bug).unwrap();
        assert!(!report.passed(), "{report}");
        assert!(report.max_deviation > 0.1, "{report}");
    }
}

#[test]
fn reference_forward_matches_library_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in TreeKind::ALL {
        for depth in 1..=4 {
            let s = spec(kind, depth, 1);
            for _ in 0..20 {
                let tree = random_tree(&s, &mut rng, 1.5);
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fast = tree_forward(&x, &tree, &s);
                let slow = reference_tree_forward(&tree, &s, &x);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12, "{kind} D={depth}: {fast:?} vs {slow:?}");
                }
            }
        }
    }
}

#[test]
fn oblivious_expansion_matches() {
    for depth in 1..=3 {
        let report = expansion_check(&spec(TreeKind::Oblivious, depth, 1), 100, 5).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.cases, 100);
    }
    let s = spec(TreeKind::Oblivious, 2, 1);
    let tree = random_tree(&s, &mut ChaCha8Rng::seed_from_u64(0), 1.0);
    let (_, e) = expand_oblivious(&tree, &s).unwrap();
    assert_eq!(e.b.len(), 3);
    assert_eq!(e.b[1], e.b[2]);
    assert_eq!(e.w[4..8], e.w[8..12]);
}

#[test]
fn gradients_match_finite_differences() {
    for kind in TreeKind::ALL {
        let s = ArchitectureSpec::new(kind, 2, 2, 3, 2).unwrap();
        let report = gradient_check(&s, 8, 21, 1e-6, 1e-6).unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn lap_agrees_with_brute_force() {
    let report = lap_cross_check(100, 6, 99).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.cases, 100);
    assert_eq!(report.max_deviation, 0.0);
}

#[test]
fn lap_permutation_matches_brute_force_on_integer_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 2..=7 {
        for _ in 0..20 {
            let values: Vec<f64> = (0..n * n).map(|_| rng.random_range(0..3) as f64).collect();
            let s = SimilarityMatrix::from_fn(n, n, |i, j| values[i * n + j]);
            assert_eq!(
                linear_sum_assignment(&s, true).unwrap(),
                brute_force_lap(&s, true).unwrap()
            );
            assert_eq!(
                linear_sum_assignment(&s, false).unwrap(),
                brute_force_lap(&s, false).unwrap()
            );
        }
    }
}

/// `B[j] = adjust(A[perm[j]], ops[q[j]])` for a random permutation and ops.
fn shuffled_copy(a: &EnsembleParams, seed: u64) -> (EnsembleParams, Alignment) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = enumerate_ops(&a.spec).unwrap();
    let mut p: Vec<usize> = (0..a.spec.trees).collect();
    p.shuffle(&mut rng);
    let q: Vec<usize> = (0..a.spec.trees).map(|_| rng.random_range(0..ops.len())).collect();
    let truth = Alignment { p, q };
    (apply_alignment(a, &truth).unwrap(), truth)
}

#[test]
fn matchers_recover_shuffled_copies() {
    let data = synth_gaussian_blobs(200, 4, 3, 3.0, 1).unwrap();
    let samples: Vec<Vec<f64>> = data.rows().map(<[f64]>::to_vec).collect();
    let grid = lambda_grid(24);
    for kind in TreeKind::ALL {
        for depth in 1..=3 {
            let s = spec(kind, depth, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
            let a = EnsembleParams {
                spec: s,
                trees: (0..8).map(|_| random_tree(&s, &mut rng, 1.0)).collect(),
            };
            let (b, _) = shuffled_copy(&a, 40 + depth as u64);
            for (name, al) in [
                ("wm", weight_matching(&a, &b).unwrap()),
                ("am", activation_matching(&a, &b, &samples).unwrap()),
            ] {
                let aligned = apply_alignment(&a, &al).unwrap();
                assert_eq!(aligned, b, "{name} {kind} D={depth}");
                let curve = barrier(&aligned, &b, &data, &grid).unwrap();
                assert!(curve.values.iter().all(|&v| v == curve.endpoint_b));
                assert_eq!(curve.barrier, 0.0);
            }
        }
    }
}

#[test]
fn ensemble_forward_is_permutation_invariant() {
    let s = spec(TreeKind::NonOblivious, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = EnsembleParams {
        spec: s,
        trees: (0..6).map(|_| random_tree(&s, &mut rng, 1.0)).collect(),
    };
    let (b, _) = shuffled_copy(&a, 8);
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (ya, yb) = (ensemble_forward(&x, &a), ensemble_forward(&x, &b));
        for (u, v) in ya.iter().zip(&yb) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
