//! Tree alignment between two ensembles of the same architecture.
//!
//! Model `A` is transformed toward the fixed model `B`. Tree permutation is
//! resolved with a single linear assignment; subtree flip and splitting order
//! are resolved by exhaustive search over [`enumerate_ops`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::invariance::{adjust_unchecked, enumerate_ops, weighting, InvarianceOp};
use crate::lap::{linear_sum_assignment, SimilarityMatrix};
use crate::model::{tree_forward_with, ArchitectureSpec, EnsembleParams, Layout, Workspace};

/// Number of sampled inputs used by activation matching.
pub const DEFAULT_ACTIVATION_SAMPLES: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Wm,
    Am,
}

impl MatchMethod {
    pub fn name(self) -> &'static str {
        match self {
            MatchMethod::Wm => "wm",
            MatchMethod::Am => "am",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "wm" => Some(MatchMethod::Wm),
            "am" => Some(MatchMethod::Am),
            _ => None,
        }
    }
}

/// Which invariances an alignment may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvarianceLevel {
    /// No alignment at all.
    Naive,
    /// Tree permutation only.
    Perm,
    /// Tree permutation plus subtree flip and splitting order.
    Full,
}

impl InvarianceLevel {
    pub const ALL: [InvarianceLevel; 3] = [InvarianceLevel::Naive, InvarianceLevel::Perm, InvarianceLevel::Full];

    pub fn name(self) -> &'static str {
        match self {
            InvarianceLevel::Naive => "naive",
            InvarianceLevel::Perm => "perm",
            InvarianceLevel::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        InvarianceLevel::ALL.into_iter().find(|l| l.name() == name)
    }
}

/// `aligned[j] = adjust_tree(A[p[j]], ops[q[j]])`, with 0-based indices into
/// the trees of `A` and into [`enumerate_ops`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

impl Alignment {
    pub fn identity(trees: usize) -> Self {
        Alignment {
            p: (0..trees).collect(),
            q: vec![0; trees],
        }
    }
}

/// Alignment together with the matching objective it attains.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub alignment: Alignment,
    /// `sum_j S[p[j], j]` of the assignment matrix that was solved.
    pub objective: f64,
}

fn check_pair(a: &EnsembleParams, b: &EnsembleParams) -> Result<()> {
    if a.spec != b.spec {
        return Err(Error::SpecMismatch(format!("{:?} vs {:?}", a.spec, b.spec)));
    }
    a.validate()?;
    b.validate()
}

fn ops_for(spec: &ArchitectureSpec, level: InvarianceLevel) -> Result<Vec<InvarianceOp>> {
    match level {
        InvarianceLevel::Full => enumerate_ops(spec),
        _ => Ok(vec![InvarianceOp::identity(spec)]),
    }
}

/// Index of the best-scoring op for each `(a, b)` tree pair, ties to the
/// lowest op index, together with that score.
fn best_ops(
    wa: &EnsembleParams,
    wb: &EnsembleParams,
    ops: &[InvarianceOp],
    pairs: &[(usize, usize)],
) -> Vec<(usize, f64)> {
    pairs.par_iter().map(|&(ma, mb)| best_op(wa, wb, ops, ma, mb)).collect()
}

fn best_op(wa: &EnsembleParams, wb: &EnsembleParams, ops: &[InvarianceOp], ma: usize, mb: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (u, op) in ops.iter().enumerate() {
        let adjusted = adjust_unchecked(&wa.trees[ma], op, &wa.spec);
        let score = adjusted.dot(&wb.trees[mb]);
        if score > best.1 {
            best = (u, score);
        }
    }
    best
}

/// Weight matching with all invariances.
pub fn weight_matching(a: &EnsembleParams, b: &EnsembleParams) -> Result<Alignment> {
    Ok(weight_matching_at(a, b, InvarianceLevel::Full)?.alignment)
}

/// Weight matching restricted to `level`. Both models are weighted, every op
/// is applied to every weighted tree of `A` and scored against every weighted
/// tree of `B`; the assignment maximizes the best score per pair.
pub fn weight_matching_at(a: &EnsembleParams, b: &EnsembleParams, level: InvarianceLevel) -> Result<MatchOutcome> {
    check_pair(a, b)?;
    let m = a.spec.trees;
    if level == InvarianceLevel::Naive {
        return Ok(MatchOutcome {
            alignment: Alignment::identity(m),
            objective: diagonal_objective(a, b),
        });
    }
    let ops = ops_for(&a.spec, level)?;
    let (wa, wb) = (weighting(a), weighting(b));
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let scored = best_ops(&wa, &wb, &ops, &pairs);
    let sim = SimilarityMatrix::from_fn(m, m, |i, j| scored[i * m + j].1);
    let p = linear_sum_assignment(&sim, true)?;
    let q = p.iter().enumerate().map(|(j, &i)| scored[i * m + j].0).collect();
    Ok(MatchOutcome {
        objective: sim.objective(&p),
        alignment: Alignment { p, q },
    })
}

/// Weighted inner product of tree `j` of `A` with tree `j` of `B`, summed.
fn diagonal_objective(a: &EnsembleParams, b: &EnsembleParams) -> f64 {
    let (wa, wb) = (weighting(a), weighting(b));
    wa.trees.iter().zip(&wb.trees).map(|(x, y)| x.dot(y)).sum()
}

/// Per-tree outputs, flattened row by row: `out[m][i * C + c]`.
pub fn tree_outputs(params: &EnsembleParams, samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let spec = params.spec;
    let layout = Layout::new(&spec);
    params
        .trees
        .par_iter()
        .map(|tree| {
            let mut ws = Workspace::new(&spec);
            let mut out = vec![0.0; samples.len() * spec.classes];
            for (x, o) in samples.iter().zip(out.chunks_exact_mut(spec.classes)) {
                tree_forward_with(&layout, &mut ws, x, tree, o);
            }
            out
        })
        .collect()
}

/// Activation matching with all invariances.
pub fn activation_matching(a: &EnsembleParams, b: &EnsembleParams, samples: &[Vec<f64>]) -> Result<Alignment> {
    Ok(activation_matching_at(a, b, samples, InvarianceLevel::Full)?.alignment)
}

/// Activation matching restricted to `level`. Trees are paired by the inner
/// product of their outputs on `samples`; the op for each pair is then chosen
/// on weighted parameters of the paired trees `(A[p[j]], B[j])`.
pub fn activation_matching_at(
    a: &EnsembleParams,
    b: &EnsembleParams,
    samples: &[Vec<f64>],
    level: InvarianceLevel,
) -> Result<MatchOutcome> {
    check_pair(a, b)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "activation matching needs at least one sample".into(),
        ));
    }
    if let Some(x) = samples.iter().find(|x| x.len() != a.spec.features) {
        return Err(Error::Shape(format!(
            "sample has {} features, model expects {}",
            x.len(),
            a.spec.features
        )));
    }
    let m = a.spec.trees;
    let (oa, ob) = (tree_outputs(a, samples), tree_outputs(b, samples));
    let sim = SimilarityMatrix::from_fn(m, m, |i, j| crate::model::dot(&oa[i], &ob[j]));
    if level == InvarianceLevel::Naive {
        let p: Vec<usize> = (0..m).collect();
        return Ok(MatchOutcome {
            objective: sim.objective(&p),
            alignment: Alignment::identity(m),
        });
    }
    let p = linear_sum_assignment(&sim, true)?;
    let ops = ops_for(&a.spec, level)?;
    let (wa, wb) = (weighting(a), weighting(b));
    let pairs: Vec<(usize, usize)> = p.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    let q = best_ops(&wa, &wb, &ops, &pairs).into_iter().map(|(u, _)| u).collect();
    Ok(MatchOutcome {
        objective: sim.objective(&p),
        alignment: Alignment { p, q },
    })
}

/// `count` distinct rows of `data` (all rows if fewer), chosen by `seed`.
pub fn sample_inputs(data: &Dataset, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(count);
    idx.iter().map(|&i| data.row(i).to_vec()).collect()
}

/// Checks that `alignment` fits `spec` and returns its op list.
pub fn validate_alignment(spec: &ArchitectureSpec, alignment: &Alignment) -> Result<Vec<InvarianceOp>> {
    let m = spec.trees;
    if alignment.p.len() != m || alignment.q.len() != m {
        return Err(Error::InvalidAlignment(format!(
            "alignment has {} / {} entries for {} trees",
            alignment.p.len(),
            alignment.q.len(),
            m
        )));
    }
    let mut seen = vec![false; m];
    for &i in &alignment.p {
        if i >= m || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidAlignment(format!(
                "p = {:?} is not a permutation",
                alignment.p
            )));
        }
    }
    let ops = if alignment.q.iter().all(|&u| u == 0) {
        vec![InvarianceOp::identity(spec)]
    } else {
        enumerate_ops(spec)?
    };
    if let Some(&u) = alignment.q.iter().find(|&&u| u >= ops.len()) {
        return Err(Error::InvalidAlignment(format!(
            "operation index {u} out of range (U = {})",
            ops.len()
        )));
    }
    Ok(ops)
}

/// Materializes an alignment: a functionally equivalent copy of `A`.
pub fn apply_alignment(a: &EnsembleParams, alignment: &Alignment) -> Result<EnsembleParams> {
    a.validate()?;
    let ops = validate_alignment(&a.spec, alignment)?;
    let trees = alignment
        .p
        .iter()
        .zip(&alignment.q)
        .map(|(&i, &u)| adjust_unchecked(&a.trees[i], &ops[u], &a.spec))
        .collect();
    Ok(EnsembleParams { spec: a.spec, trees })
}

/// Alignment for `level` using `method`; `Naive` always returns the identity.
pub fn align(
    a: &EnsembleParams,
    b: &EnsembleParams,
    method: MatchMethod,
    level: InvarianceLevel,
    samples: &[Vec<f64>],
) -> Result<MatchOutcome> {
    match method {
        MatchMethod::Wm => weight_matching_at(a, b, level),
        MatchMethod::Am => activation_matching_at(a, b, samples, level),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, TreeKind};

    fn pair(kind: TreeKind, depth: usize, trees: usize) -> (EnsembleParams, EnsembleParams) {
        let spec = ArchitectureSpec::new(kind, depth, trees, 3, 2).unwrap();
        (init_params(&spec, 1).unwrap(), init_params(&spec, 2).unwrap())
    }

    #[test]
    fn single_tree_is_identity_permutation() {
        let (a, b) = pair(TreeKind::NonOblivious, 2, 1);
        let wm = weight_matching(&a, &b).unwrap();
        assert_eq!(wm.p, vec![0]);
        let samples: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64 / 8.0 - 1.0, 0.5, -0.25]).collect();
        let am = activation_matching(&a, &b, &samples).unwrap();
        assert_eq!(am.p, vec![0]);
        // with one tree both matchers choose the op on the same pair
        assert_eq!(am.q, wm.q);
    }

    #[test]
    fn self_match_is_identity() {
        let (a, _) = pair(TreeKind::Oblivious, 2, 6);
        let al = weight_matching(&a, &a).unwrap();
        assert_eq!(al, Alignment::identity(6));
    }

    #[test]
    fn perm_level_uses_identity_ops() {
        let (a, b) = pair(TreeKind::NonOblivious, 2, 5);
        let out = weight_matching_at(&a, &b, InvarianceLevel::Perm).unwrap();
        assert!(out.alignment.q.iter().all(|&u| u == 0));
        let naive = weight_matching_at(&a, &b, InvarianceLevel::Naive).unwrap();
        assert_eq!(naive.alignment, Alignment::identity(5));
    }

    #[test]
    fn rejects_spec_mismatch_and_bad_alignment() {
        let (a, _) = pair(TreeKind::NonOblivious, 2, 3);
        let (c, _) = pair(TreeKind::Oblivious, 2, 3);
        assert!(weight_matching(&a, &c).is_err());
        let bad = Alignment {
            p: vec![0, 0, 1],
            q: vec![0; 3],
        };
        assert!(apply_alignment(&a, &bad).is_err());
        let bad_q = Alignment {
            p: vec![0, 1, 2],
            q: vec![0, 8, 0],
        };
        assert!(apply_alignment(&a, &bad_q).is_err());
        let short = Alignment {
            p: vec![0, 1],
            q: vec![0, 0],
        };
        assert!(apply_alignment(&a, &short).is_err());
    }

    #[test]
    fn activation_matching_rejects_empty_samples() {
        let (a, b) = pair(TreeKind::DecisionList, 2, 2);
        assert!(activation_matching(&a, &b, &[]).is_err());
        assert!(activation_matching(&a, &b, &[vec![0.0; 2]]).is_err());
    }

    #[test]
    fn identity_alignment_is_noop() {
        let (a, _) = pair(TreeKind::ModifiedDecisionList, 3, 4);
        assert_eq!(apply_alignment(&a, &Alignment::identity(4)).unwrap(), a);
    }
}
