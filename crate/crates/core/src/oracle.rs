//! Slow, independent reference computations used to validate the fast paths.
//!
//! Nothing here reuses the traversal code of [`crate::model`] or the solver
//! of [`crate::lap`]: trees are evaluated by explicit recursion, assignments
//! by enumerating every permutation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::invariance::{adjust_tree, enumerate_ops, InvarianceOp};
use crate::lap::{linear_sum_assignment, SimilarityMatrix};
use crate::model::{tree_forward, ArchitectureSpec, EnsembleParams, TreeKind, TreeParams};
use crate::training::gradients;

/// Largest matrix the brute-force assignment accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Outcome of an oracle run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub first_failure: Option<String>,
}

impl OracleReport {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        OracleReport {
            name: name.into(),
            cases: 0,
            max_deviation: 0.0,
            tolerance,
            first_failure: None,
        }
    }

    fn record(&mut self, deviation: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        // NaN counts as a failure
        if !(deviation <= self.max_deviation) {
            self.max_deviation = if deviation.is_nan() { f64::INFINITY } else { deviation };
        }
        if !(deviation < self.tolerance) && self.first_failure.is_none() {
            self.first_failure = Some(describe());
        }
    }

    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} cases, max deviation {:.3e} (tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_deviation,
            self.tolerance
        )?;
        if let Some(fail) = &self.first_failure {
            write!(f, "; first failure: {fail}")?;
        }
        Ok(())
    }
}

/// Exhaustive assignment over all `M!` permutations, returning the
/// lexicographically first optimum.
pub fn brute_force_lap(s: &SimilarityMatrix, maximize: bool) -> Result<Vec<usize>> {
    let n = s.rows();
    if n != s.cols() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", n, s.cols())));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::InvalidInput(format!(
            "brute-force assignment is limited to {BRUTE_FORCE_MAX}x{BRUTE_FORCE_MAX}, got {n}x{n}"
        )));
    }
    struct Search<'a> {
        s: &'a SimilarityMatrix,
        sign: f64,
        best: Option<(f64, Vec<usize>)>,
        current: Vec<usize>,
        used: Vec<bool>,
    }
    fn visit(st: &mut Search<'_>) {
        let n = st.used.len();
        if st.current.len() == n {
            let value: f64 = st.current.iter().enumerate().map(|(j, &r)| st.s.get(r, j)).sum();
            let better = match &st.best {
                None => true,
                Some((b, _)) => st.sign * value > st.sign * b,
            };
            if better {
                st.best = Some((value, st.current.clone()));
            }
            return;
        }
        for r in 0..n {
            if !st.used[r] {
                st.used[r] = true;
                st.current.push(r);
                visit(st);
                st.current.pop();
                st.used[r] = false;
            }
        }
    }
    let mut st = Search {
        s,
        sign: if maximize { 1.0 } else { -1.0 },
        best: None,
        current: Vec::with_capacity(n),
        used: vec![false; n],
    };
    visit(&mut st);
    Ok(st.best.map(|(_, p)| p).unwrap_or_default())
}

/// Materializes an oblivious tree as a non-oblivious tree with every
/// depth-`d` node holding the depth-`d` parameters.
pub fn expand_oblivious(tree: &TreeParams, spec: &ArchitectureSpec) -> Result<(ArchitectureSpec, TreeParams)> {
    if spec.kind != TreeKind::Oblivious {
        return Err(Error::InvalidSpec(format!(
            "expected an oblivious tree, got {}",
            spec.kind
        )));
    }
    tree.check_shape(spec)?;
    let expanded_spec = ArchitectureSpec {
        kind: TreeKind::NonOblivious,
        ..*spec
    };
    let f = spec.features;
    let mut w = Vec::new();
    let mut b = Vec::new();
    for depth in 0..spec.depth {
        for _ in 0..1usize << depth {
            w.extend_from_slice(&tree.w[depth * f..(depth + 1) * f]);
            b.push(tree.b[depth]);
        }
    }
    Ok((
        expanded_spec,
        TreeParams {
            w,
            b,
            pi: tree.pi.clone(),
        },
    ))
}

fn plain_sigmoid(z: f64) -> f64 {
    // exp(-z) overflows to inf for very negative z, which still yields 0
    1.0 / (1.0 + (-z).exp())
}

fn split_input(tree: &TreeParams, slot: usize, f: usize, x: &[f64]) -> f64 {
    let mut z = tree.b[slot];
    for k in 0..f {
        z += tree.w[slot * f + k] * x[k];
    }
    z
}

/// Tree output by explicit recursion over the tree structure.
pub fn reference_tree_forward(tree: &TreeParams, spec: &ArchitectureSpec, x: &[f64]) -> Vec<f64> {
    let (f, c) = (spec.features, spec.classes);
    let mut out = vec![0.0; c];
    match spec.kind {
        TreeKind::NonOblivious | TreeKind::Oblivious => {
            fn descend(
                tree: &TreeParams,
                spec: &ArchitectureSpec,
                x: &[f64],
                node: usize,
                depth: usize,
                path: usize,
                mass: f64,
                out: &mut [f64],
            ) {
                let (f, c) = (spec.features, spec.classes);
                if depth == spec.depth {
                    for k in 0..c {
                        out[k] += mass * tree.pi[path * c + k];
                    }
                    return;
                }
                let slot = if spec.kind == TreeKind::Oblivious { depth } else { node };
                let left = plain_sigmoid(split_input(tree, slot, f, x));
                descend(tree, spec, x, 2 * node + 1, depth + 1, path, mass * left, out);
                descend(
                    tree,
                    spec,
                    x,
                    2 * node + 2,
                    depth + 1,
                    path | (1 << depth),
                    mass * (1.0 - left),
                    out,
                );
            }
            descend(tree, spec, x, 0, 0, 0, 1.0, &mut out);
        }
        TreeKind::DecisionList | TreeKind::ModifiedDecisionList => {
            let mut remaining = 1.0;
            for node in 0..spec.depth {
                let left = plain_sigmoid(split_input(tree, node, f, x));
                for k in 0..c {
                    out[k] += remaining * left * tree.pi[node * c + k];
                }
                remaining *= 1.0 - left;
            }
            if spec.kind == TreeKind::DecisionList {
                let last = spec.depth;
                for k in 0..c {
                    out[k] += remaining * tree.pi[last * c + k];
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random tree with N(0, scale^2) entries.
pub fn random_tree(spec: &ArchitectureSpec, rng: &mut impl Rng, scale: f64) -> TreeParams {
    let mut tree = TreeParams::zeros(spec);
    for v in tree.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
    tree
}

fn random_input(features: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..features).map(|_| rng.sample(StandardNormal)).collect()
}

/// Inputs per random tree in [`equivalence_sweep`].
pub const SWEEP_INPUTS: usize = 20;

/// For `trials` random trees and every enumerated op, the largest output
/// deviation between the tree and its adjusted copy over random inputs.
pub fn equivalence_sweep(spec: &ArchitectureSpec, trials: usize, seed: u64) -> Result<OracleReport> {
    equivalence_sweep_with(spec, trials, seed, 1e-12, adjust_tree)
}

/// As [`equivalence_sweep`] with a caller-supplied adjustment, which lets
/// tests confirm that a faulty adjustment is caught.
pub fn equivalence_sweep_with<F>(
    spec: &ArchitectureSpec,
    trials: usize,
    seed: u64,
    tolerance: f64,
    adjust: F,
) -> Result<OracleReport>
where
    F: Fn(&TreeParams, &InvarianceOp, &ArchitectureSpec) -> Result<TreeParams>,
{
    let ops = enumerate_ops(spec)?;
    let mut report = OracleReport::new(format!("equivalence {} D={}", spec.kind, spec.depth), tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let tree = random_tree(spec, &mut rng, 1.0);
        let inputs: Vec<Vec<f64>> = (0..SWEEP_INPUTS)
            .map(|_| random_input(spec.features, &mut rng))
            .collect();
        let base: Vec<Vec<f64>> = inputs.iter().map(|x| reference_tree_forward(&tree, spec, x)).collect();
        for (u, op) in ops.iter().enumerate() {
            let adjusted = adjust(&tree, op, spec)?;
            let dev = inputs
                .iter()
                .zip(&base)
                .map(|(x, y)| max_abs_diff(&reference_tree_forward(&adjusted, spec, x), y))
                .fold(0.0, f64::max);
            report.record(dev, || format!("trial {trial}, op {u} ({op:?}): deviation {dev:.3e}"));
        }
    }
    Ok(report)
}

/// Oblivious trees against their expansion, evaluated by the library forward
/// pass on both layouts and by the reference recursion.
pub fn expansion_check(spec: &ArchitectureSpec, cases: usize, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new(format!("oblivious expansion D={}", spec.depth), 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let tree = random_tree(spec, &mut rng, 1.0);
        let x = random_input(spec.features, &mut rng);
        let (espec, expanded) = expand_oblivious(&tree, spec)?;
        let oblivious = tree_forward(&x, &tree, spec);
        let dev = max_abs_diff(&oblivious, &tree_forward(&x, &expanded, &espec))
            .max(max_abs_diff(&oblivious, &reference_tree_forward(&expanded, &espec, &x)));
        report.record(dev, || format!("case {case}: deviation {dev:.3e}"));
    }
    Ok(report)
}

/// Fast assignment objective against brute force on random matrices with
/// sizes cycling through `2..=max_size`.
pub fn lap_cross_check(trials: usize, max_size: usize, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport::new("assignment vs brute force", f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_size = max_size.clamp(2, BRUTE_FORCE_MAX);
    for trial in 0..trials {
        let n = 2 + trial % (max_size - 1);
        let values: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let s = SimilarityMatrix::from_fn(n, n, |i, j| values[i * n + j]);
        let maximize = trial % 2 == 0;
        let fast = linear_sum_assignment(&s, maximize)?;
        let slow = brute_force_lap(&s, maximize)?;
        let dev = (s.objective(&fast) - s.objective(&slow)).abs();
        report.record(dev, || {
            format!("trial {trial} ({n}x{n}): fast {fast:?} vs brute {slow:?}")
        });
    }
    Ok(report)
}

type Wide = TwoFloat;

fn wide_tree_forward(tree: &TreeParams, spec: &ArchitectureSpec, x: &[f64]) -> Vec<Wide> {
    let (f, c) = (spec.features, spec.classes);
    let one = Wide::from(1.0);
    let gate = |slot: usize| {
        let mut z = Wide::from(tree.b[slot]);
        for k in 0..f {
            z += Wide::from(tree.w[slot * f + k]) * Wide::from(x[k]);
        }
        one / (one + (-z).exp())
    };
    let mut out = vec![Wide::from(0.0); c];
    let add_leaf = |leaf: usize, mass: Wide, out: &mut [Wide]| {
        for k in 0..c {
            out[k] += mass * Wide::from(tree.pi[leaf * c + k]);
        }
    };
    match spec.kind {
        TreeKind::NonOblivious | TreeKind::Oblivious => {
            let gates: Vec<Wide> = (0..tree.b.len()).map(gate).collect();
            for leaf in 0..spec.leaf_count() {
                let (mut node, mut mass) = (0usize, one);
                for depth in 0..spec.depth {
                    let slot = if spec.kind == TreeKind::Oblivious { depth } else { node };
                    let right = (leaf >> depth) & 1 == 1;
                    mass *= if right { one - gates[slot] } else { gates[slot] };
                    node = 2 * node + 1 + usize::from(right);
                }
                add_leaf(leaf, mass, &mut out);
            }
        }
        TreeKind::DecisionList | TreeKind::ModifiedDecisionList => {
            let mut remaining = one;
            for node in 0..spec.depth {
                let g = gate(node);
                add_leaf(node, remaining * g, &mut out);
                remaining *= one - g;
            }
            if spec.kind == TreeKind::DecisionList {
                add_leaf(spec.depth, remaining, &mut out);
            }
        }
    }
    out
}

/// Mean cross-entropy in double-double precision.
fn wide_loss(params: &EnsembleParams, batch: &[(Vec<f64>, usize)]) -> Wide {
    let spec = &params.spec;
    let mut total = Wide::from(0.0);
    for (x, label) in batch {
        let mut logits = vec![Wide::from(0.0); spec.classes];
        for tree in &params.trees {
            for (l, t) in logits.iter_mut().zip(wide_tree_forward(tree, spec, x)) {
                *l += t;
            }
        }
        let max = logits.iter().copied().fold(logits[0], |m, v| if v > m { v } else { m });
        let mut sum = Wide::from(0.0);
        for &v in &logits {
            sum += (v - max).exp();
        }
        total += max + sum.ln() - logits[*label];
    }
    total / Wide::from(batch.len() as f64)
}

/// Relative error `|a - n| / max(|a|, |n|)` between analytic and central
/// finite-difference gradients (step `h`), with the denominator floored at
/// `floor` so exactly-zero gradients compare absolutely. The numeric side
/// evaluates the loss in double-double precision and divides by the exact
/// distance between the perturbed parameter values, so its own error is far
/// below the tolerance.
pub fn gradient_check(spec: &ArchitectureSpec, rows: usize, seed: u64, h: f64, tolerance: f64) -> Result<OracleReport> {
    let floor = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EnsembleParams {
        spec: *spec,
        trees: (0..spec.trees).map(|_| random_tree(spec, &mut rng, 0.8)).collect(),
    };
    let batch: Vec<(Vec<f64>, usize)> = (0..rows)
        .map(|_| (random_input(spec.features, &mut rng), rng.random_range(0..spec.classes)))
        .collect();
    let borrowed: Vec<(&[f64], usize)> = batch.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
    let analytic: Vec<f64> = gradients(&params, &borrowed)?.iter().copied().collect();

    let mut report = OracleReport::new(format!("gradient {} D={}", spec.kind, spec.depth), tolerance);
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        let (up, down) = (
            plus.iter_mut().nth(k).expect("index in range"),
            minus.iter_mut().nth(k).expect("index in range"),
        );
        *up += h;
        *down -= h;
        let step = Wide::from(*up) - Wide::from(*down);
        let numeric: f64 = ((wide_loss(&plus, &batch) - wide_loss(&minus, &batch)) / step).into();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.record(rel, || {
            format!("parameter {k}: analytic {a:.6e}, numeric {numeric:.6e}")
        });
    }
    Ok(report)
}
