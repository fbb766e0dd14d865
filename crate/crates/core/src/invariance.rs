//! Function-preserving reparameterizations of a single soft tree.
//!
//! - Subtree flip: negating `(w_n, b_n)` and swapping the two subtrees below
//!   `n` leaves the tree function unchanged because `sigmoid(-z) = 1 - sigmoid(z)`.
//! - Splitting order: an oblivious tree may permute its depths if the leaves
//!   are relocated accordingly.
//!
//! Non-oblivious trees have `2^(2^D - 1)` flip patterns, oblivious trees
//! `2^D * D!` order/flip patterns, decision lists only the flip of their
//! terminal node and modified decision lists nothing beyond the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, EnsembleParams, TreeKind, TreeParams};

/// Default cap on the number of enumerated operations.
pub const DEFAULT_OP_BUDGET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvarianceOp {
    /// Flip bits over the original node positions (breadth-first order).
    NonOblivious {
        flips: Vec<bool>,
    },
    /// New depth `d` takes the parameters of old depth `order[d]`, negated if
    /// `flips[d]`.
    Oblivious {
        order: Vec<usize>,
        flips: Vec<bool>,
    },
    DecisionList {
        terminal_flip: bool,
    },
    ModifiedDecisionList,
}

impl InvarianceOp {
    pub fn identity(spec: &ArchitectureSpec) -> Self {
        match spec.kind {
            TreeKind::NonOblivious => InvarianceOp::NonOblivious {
                flips: vec![false; spec.node_count()],
            },
            TreeKind::Oblivious => InvarianceOp::Oblivious {
                order: (0..spec.depth).collect(),
                flips: vec![false; spec.depth],
            },
            TreeKind::DecisionList => InvarianceOp::DecisionList { terminal_flip: false },
            TreeKind::ModifiedDecisionList => InvarianceOp::ModifiedDecisionList,
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            InvarianceOp::NonOblivious { flips } => !flips.iter().any(|&f| f),
            InvarianceOp::Oblivious { order, flips } => {
                order.iter().enumerate().all(|(i, &o)| i == o) && !flips.iter().any(|&f| f)
            }
            InvarianceOp::DecisionList { terminal_flip } => !terminal_flip,
            InvarianceOp::ModifiedDecisionList => true,
        }
    }

    fn check(&self, spec: &ArchitectureSpec) -> Result<()> {
        let ok = match (self, spec.kind) {
            (InvarianceOp::NonOblivious { flips }, TreeKind::NonOblivious) => flips.len() == spec.node_count(),
            (InvarianceOp::Oblivious { order, flips }, TreeKind::Oblivious) => {
                let mut seen = vec![false; spec.depth];
                order.len() == spec.depth
                    && flips.len() == spec.depth
                    && order
                        .iter()
                        .all(|&o| o < spec.depth && !std::mem::replace(&mut seen[o], true))
            }
            (InvarianceOp::DecisionList { .. }, TreeKind::DecisionList) => true,
            (InvarianceOp::ModifiedDecisionList, TreeKind::ModifiedDecisionList) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidOp(format!(
                "{self:?} does not apply to {} depth {}",
                spec.kind, spec.depth
            )))
        }
    }
}

/// Number of operations `U` for `spec`, saturating at `u128::MAX`.
pub fn op_count(spec: &ArchitectureSpec) -> u128 {
    match spec.kind {
        TreeKind::NonOblivious => {
            let bits = spec.node_count();
            if bits >= 128 {
                u128::MAX
            } else {
                1u128 << bits
            }
        }
        TreeKind::Oblivious => {
            let mut u: u128 = 1u128.checked_shl(spec.depth as u32).unwrap_or(u128::MAX);
            for k in 2..=spec.depth as u128 {
                u = u.saturating_mul(k);
            }
            u
        }
        TreeKind::DecisionList => 2,
        TreeKind::ModifiedDecisionList => 1,
    }
}

/// All operations for `spec` with the default budget.
pub fn enumerate_ops(spec: &ArchitectureSpec) -> Result<Vec<InvarianceOp>> {
    enumerate_ops_with_budget(spec, DEFAULT_OP_BUDGET)
}

/// All operations, identity first. Non-oblivious masks are ordered by their
/// integer value (bit `n` = node `n`); oblivious operations iterate depth
/// orders lexicographically and flip masks within each order.
pub fn enumerate_ops_with_budget(spec: &ArchitectureSpec, budget: u64) -> Result<Vec<InvarianceOp>> {
    spec.validate()?;
    let count = op_count(spec);
    if count > budget as u128 {
        return Err(Error::BudgetExceeded { count, budget });
    }
    let bits = |mask: usize, n: usize| (0..n).map(|i| (mask >> i) & 1 == 1).collect::<Vec<_>>();
    let ops = match spec.kind {
        TreeKind::NonOblivious => {
            let n = spec.node_count();
            (0..count as usize)
                .map(|mask| InvarianceOp::NonOblivious { flips: bits(mask, n) })
                .collect()
        }
        TreeKind::Oblivious => {
            let d = spec.depth;
            let mut ops = Vec::with_capacity(count as usize);
            for order in permutations(d) {
                for mask in 0..1usize << d {
                    ops.push(InvarianceOp::Oblivious {
                        order: order.clone(),
                        flips: bits(mask, d),
                    });
                }
            }
            ops
        }
        TreeKind::DecisionList => vec![
            InvarianceOp::DecisionList { terminal_flip: false },
            InvarianceOp::DecisionList { terminal_flip: true },
        ],
        TreeKind::ModifiedDecisionList => vec![InvarianceOp::ModifiedDecisionList],
    };
    Ok(ops)
}

/// Permutations of `0..n` in lexicographic order.
pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

fn negate_node(tree: &mut TreeParams, node: usize, features: usize) {
    for v in &mut tree.w[node * features..(node + 1) * features] {
        *v = -*v;
    }
    tree.b[node] = -tree.b[node];
}

fn swap_nodes(tree: &mut TreeParams, a: usize, b: usize, features: usize) {
    for f in 0..features {
        tree.w.swap(a * features + f, b * features + f);
    }
    tree.b.swap(a, b);
}

fn swap_leaves(tree: &mut TreeParams, a: usize, b: usize, classes: usize) {
    for c in 0..classes {
        tree.pi.swap(a * classes + c, b * classes + c);
    }
}

/// Depth of breadth-first node `n` and the leaf-bit prefix of its path.
fn node_path(n: usize) -> (usize, usize) {
    let depth = (usize::BITS - 1 - (n + 1).leading_zeros()) as usize;
    let offset = n + 1 - (1 << depth);
    // offset holds the path root-first in its high bits; leaves hold it
    // root-first in their low bits.
    let prefix = (0..depth).fold(0, |acc, k| acc | (((offset >> (depth - 1 - k)) & 1) << k));
    (depth, prefix)
}

/// Swaps the left and right subtrees of breadth-first node `n`, moving the
/// flip bits of the swapped nodes along with them.
fn swap_subtrees(tree: &mut TreeParams, flips: &mut [bool], n: usize, spec: &ArchitectureSpec) {
    let (depth, prefix) = node_path(n);
    let (left, right) = (2 * n + 1, 2 * n + 2);
    for level in 0..spec.depth.saturating_sub(depth + 1) {
        let width = 1usize << level;
        let l0 = (left + 1) * width - 1;
        let r0 = (right + 1) * width - 1;
        for k in 0..width {
            swap_nodes(tree, l0 + k, r0 + k, spec.features);
            flips.swap(l0 + k, r0 + k);
        }
    }
    let low_mask = (1usize << depth) - 1;
    for leaf in 0..spec.leaf_count() {
        if leaf & low_mask == prefix && (leaf >> depth) & 1 == 0 {
            swap_leaves(tree, leaf, leaf | (1 << depth), spec.classes);
        }
    }
}

/// Applies `op` to `tree`, returning a functionally equivalent tree.
pub fn adjust_tree(tree: &TreeParams, op: &InvarianceOp, spec: &ArchitectureSpec) -> Result<TreeParams> {
    op.check(spec)?;
    tree.check_shape(spec)?;
    Ok(adjust_unchecked(tree, op, spec))
}

pub(crate) fn adjust_unchecked(tree: &TreeParams, op: &InvarianceOp, spec: &ArchitectureSpec) -> TreeParams {
    let f = spec.features;
    let mut out = tree.clone();
    match op {
        InvarianceOp::NonOblivious { flips } => {
            let mut flips = flips.clone();
            // Breadth-first, so a node is visited after every swap that moves it.
            for n in 0..spec.node_count() {
                if flips[n] {
                    negate_node(&mut out, n, f);
                    swap_subtrees(&mut out, &mut flips, n, spec);
                }
            }
        }
        InvarianceOp::Oblivious { order, flips } => {
            let c = spec.classes;
            for (d, (&src, &flip)) in order.iter().zip(flips).enumerate() {
                let sign = if flip { -1.0 } else { 1.0 };
                for k in 0..f {
                    out.w[d * f + k] = sign * tree.w[src * f + k];
                }
                out.b[d] = sign * tree.b[src];
            }
            for leaf in 0..spec.leaf_count() {
                let target = (0..spec.depth).fold(0, |acc, d| {
                    let bit = ((leaf >> order[d]) & 1) ^ flips[d] as usize;
                    acc | (bit << d)
                });
                out.pi[target * c..(target + 1) * c].copy_from_slice(&tree.pi[leaf * c..(leaf + 1) * c]);
            }
        }
        InvarianceOp::DecisionList { terminal_flip } => {
            if *terminal_flip {
                let last = spec.depth - 1;
                negate_node(&mut out, last, f);
                swap_leaves(&mut out, last, last + 1, spec.classes);
            }
        }
        InvarianceOp::ModifiedDecisionList => {}
    }
    out
}

/// Number of leaves below each splitting slot; every leaf counts once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeWeights {
    pub nodes: Vec<usize>,
    pub leaves: Vec<usize>,
}

/// Leaf counts per splitting slot. For oblivious trees the shared depth-`d`
/// slot takes the count of any depth-`d` node of the expanded tree,
/// `2^(D - d)`. The empty leaf of the modified decision list still counts.
pub fn node_leaf_counts(spec: &ArchitectureSpec) -> NodeWeights {
    let d = spec.depth;
    let nodes = match spec.kind {
        TreeKind::NonOblivious => (0..spec.node_count()).map(|n| 1usize << (d - node_path(n).0)).collect(),
        TreeKind::Oblivious => (0..d).map(|k| 1usize << (d - k)).collect(),
        TreeKind::DecisionList | TreeKind::ModifiedDecisionList => (0..d).map(|k| d + 1 - k).collect(),
    };
    NodeWeights {
        nodes,
        leaves: vec![1; spec.stored_leaf_count()],
    }
}

pub(crate) fn weight_tree(tree: &TreeParams, scales: &[f64], features: usize) -> TreeParams {
    let mut out = tree.clone();
    for (n, &s) in scales.iter().enumerate() {
        for v in &mut out.w[n * features..(n + 1) * features] {
            *v *= s;
        }
        out.b[n] *= s;
    }
    out
}

/// Copy of `params` with every splitting slot scaled by the square root of
/// its leaf count. Leaf values keep weight 1. Used for similarity only.
pub fn weighting(params: &EnsembleParams) -> EnsembleParams {
    let scales: Vec<f64> = node_leaf_counts(&params.spec)
        .nodes
        .iter()
        .map(|&c| (c as f64).sqrt())
        .collect();
    EnsembleParams {
        spec: params.spec,
        trees: params
            .trees
            .iter()
            .map(|t| weight_tree(t, &scales, params.spec.features))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, tree_forward};

    fn spec(kind: TreeKind, depth: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(kind, depth, 1, 3, 2).unwrap()
    }

    #[test]
    fn op_counts() {
        assert_eq!(enumerate_ops(&spec(TreeKind::NonOblivious, 2)).unwrap().len(), 8);
        assert_eq!(enumerate_ops(&spec(TreeKind::Oblivious, 3)).unwrap().len(), 48);
        for d in 1..=5 {
            assert_eq!(enumerate_ops(&spec(TreeKind::DecisionList, d)).unwrap().len(), 2);
            assert_eq!(
                enumerate_ops(&spec(TreeKind::ModifiedDecisionList, d)).unwrap().len(),
                1
            );
        }
    }

    #[test]
    fn budget_is_enforced() {
        let s = spec(TreeKind::NonOblivious, 5);
        match enumerate_ops(&s) {
            Err(Error::BudgetExceeded { count, .. }) => assert_eq!(count, 1u128 << 31),
            other => panic!("expected budget error, got {other:?}"),
        }
        assert!(enumerate_ops_with_budget(&spec(TreeKind::Oblivious, 3), 47).is_err());
        assert_eq!(op_count(&spec(TreeKind::NonOblivious, 8)), u128::MAX);
    }

    #[test]
    fn identity_is_first_and_ops_are_distinct() {
        for kind in TreeKind::ALL {
            let s = spec(kind, 3);
            let ops = enumerate_ops(&s).unwrap();
            assert!(ops[0].is_identity());
            assert_eq!(ops[0], InvarianceOp::identity(&s));
            let set: std::collections::HashSet<_> = ops.iter().collect();
            assert_eq!(set.len(), ops.len());
        }
    }

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(
            permutations(3),
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn node_paths() {
        assert_eq!(node_path(0), (0, 0));
        assert_eq!(node_path(1), (1, 0));
        assert_eq!(node_path(2), (1, 1));
        // node 5: root -> right (2) -> left (5)
        assert_eq!(node_path(5), (2, 0b01));
        // node 4: root -> left (1) -> right (4)
        assert_eq!(node_path(4), (2, 0b10));
    }

    #[test]
    fn depth_one_flip() {
        let s = ArchitectureSpec::new(TreeKind::NonOblivious, 1, 1, 2, 1).unwrap();
        let tree = TreeParams {
            w: vec![0.5, -1.5],
            b: vec![0.25],
            pi: vec![2.0, -3.0],
        };
        let op = InvarianceOp::NonOblivious { flips: vec![true] };
        let flipped = adjust_tree(&tree, &op, &s).unwrap();
        assert_eq!(
            flipped,
            TreeParams {
                w: vec![-0.5, 1.5],
                b: vec![-0.25],
                pi: vec![-3.0, 2.0]
            }
        );
        let x = [0.7, 0.1];
        assert!((tree_forward(&x, &tree, &s)[0] - tree_forward(&x, &flipped, &s)[0]).abs() < 1e-15);
    }

    #[test]
    fn oblivious_depth_swap_preserves_function() {
        let s = spec(TreeKind::Oblivious, 2);
        let tree = init_params(&s, 1).unwrap().trees.remove(0);
        let op = InvarianceOp::Oblivious {
            order: vec![1, 0],
            flips: vec![false, false],
        };
        let swapped = adjust_tree(&tree, &op, &s).unwrap();
        assert_ne!(swapped, tree);
        for i in 0..100 {
            let x = [
                (i as f64 * 0.37).sin() * 2.0,
                (i as f64 * 0.11).cos(),
                i as f64 / 50.0 - 1.0,
            ];
            let a = tree_forward(&x, &tree, &s);
            let b = tree_forward(&x, &swapped, &s);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_op_is_bitwise_noop() {
        for kind in TreeKind::ALL {
            let s = spec(kind, 3);
            let tree = init_params(&s, 2).unwrap().trees.remove(0);
            assert_eq!(adjust_tree(&tree, &InvarianceOp::identity(&s), &s).unwrap(), tree);
        }
    }

    #[test]
    fn mismatched_op_is_rejected() {
        let s = spec(TreeKind::Oblivious, 2);
        let tree = TreeParams::zeros(&s);
        assert!(adjust_tree(&tree, &InvarianceOp::ModifiedDecisionList, &s).is_err());
        let bad_order = InvarianceOp::Oblivious {
            order: vec![0, 0],
            flips: vec![false, false],
        };
        assert!(adjust_tree(&tree, &bad_order, &s).is_err());
    }

    #[test]
    fn leaf_counts() {
        assert_eq!(node_leaf_counts(&spec(TreeKind::NonOblivious, 2)).nodes, vec![4, 2, 2]);
        assert_eq!(
            node_leaf_counts(&spec(TreeKind::NonOblivious, 3)).nodes,
            vec![8, 4, 4, 2, 2, 2, 2]
        );
        assert_eq!(node_leaf_counts(&spec(TreeKind::DecisionList, 3)).nodes, vec![4, 3, 2]);
        assert_eq!(
            node_leaf_counts(&spec(TreeKind::ModifiedDecisionList, 3)).nodes,
            vec![4, 3, 2]
        );
        assert_eq!(node_leaf_counts(&spec(TreeKind::Oblivious, 3)).nodes, vec![8, 4, 2]);
    }

    #[test]
    fn weighting_scales_nodes_only() {
        let s = ArchitectureSpec::new(TreeKind::NonOblivious, 1, 1, 1, 1).unwrap();
        let params = EnsembleParams {
            spec: s,
            trees: vec![TreeParams {
                w: vec![1.0],
                b: vec![2.0],
                pi: vec![3.0, 4.0],
            }],
        };
        let weighted = weighting(&params);
        let r2 = 2f64.sqrt();
        assert_eq!(weighted.trees[0].w, vec![r2]);
        assert_eq!(weighted.trees[0].b, vec![2.0 * r2]);
        assert_eq!(weighted.trees[0].pi, vec![3.0, 4.0]);
        assert_eq!(params.trees[0].w, vec![1.0]);
    }
}
