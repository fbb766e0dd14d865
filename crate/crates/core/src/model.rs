//! Soft tree architectures, their parameter layout and the forward pass.
//!
//! Every architecture is reduced to a [`Layout`]: for each leaf, the list of
//! splitting slots on its root-to-leaf path together with the branch taken.
//! The leaf flow is then the product of `sigmoid(w·x + b)` for left turns and
//! `1 - sigmoid(w·x + b)` for right turns.
//!
//! Indexing conventions:
//! - perfect binary trees use breadth-first node numbering (root 0, children
//!   `2n + 1` and `2n + 2`); leaf `l` stores its path in its bits, bit `d` set
//!   meaning the path went right at depth `d`;
//! - oblivious trees store one parameter slot per depth and use the same leaf
//!   numbering;
//! - decision lists are chains: node `d` sends its left branch to leaf `d`,
//!   the last node sends its right branch to leaf `D`. The modified decision
//!   list keeps that last leaf at zero and does not store it.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    NonOblivious,
    Oblivious,
    DecisionList,
    ModifiedDecisionList,
}

impl TreeKind {
    pub const ALL: [TreeKind; 4] = [
        TreeKind::NonOblivious,
        TreeKind::Oblivious,
        TreeKind::DecisionList,
        TreeKind::ModifiedDecisionList,
    ];

    /// Short name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            TreeKind::NonOblivious => "nonoblivious",
            TreeKind::Oblivious => "oblivious",
            TreeKind::DecisionList => "dlist",
            TreeKind::ModifiedDecisionList => "dlist-mod",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        TreeKind::ALL.into_iter().find(|k| k.cli_name() == name)
    }

    pub fn is_perfect_binary(self) -> bool {
        matches!(self, TreeKind::NonOblivious | TreeKind::Oblivious)
    }
}

impl std::fmt::Display for TreeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

/// Shape of a soft tree ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: TreeKind,
    pub depth: usize,
    pub trees: usize,
    pub features: usize,
    pub classes: usize,
}

/// Depth limit for perfect binary trees; 2^D leaves are materialized per row.
pub const MAX_PERFECT_DEPTH: usize = 20;

impl ArchitectureSpec {
    pub fn new(kind: TreeKind, depth: usize, trees: usize, features: usize, classes: usize) -> Result<Self> {
        let spec = ArchitectureSpec {
            kind,
            depth,
            trees,
            features,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.trees == 0 || self.features == 0 || self.classes == 0 {
            return Err(Error::InvalidSpec(format!(
                "depth, trees, features and classes must be positive (got {:?})",
                self
            )));
        }
        if self.kind.is_perfect_binary() && self.depth > MAX_PERFECT_DEPTH {
            return Err(Error::InvalidSpec(format!(
                "depth {} exceeds the perfect binary limit {}",
                self.depth, MAX_PERFECT_DEPTH
            )));
        }
        Ok(())
    }

    /// Number of stored splitting-parameter slots per tree.
    pub fn node_count(&self) -> usize {
        match self.kind {
            TreeKind::NonOblivious => (1 << self.depth) - 1,
            TreeKind::Oblivious | TreeKind::DecisionList | TreeKind::ModifiedDecisionList => self.depth,
        }
    }

    /// Number of leaves in the tree structure, including the fixed empty leaf
    /// of the modified decision list. This is the length of the leaf flow.
    pub fn leaf_count(&self) -> usize {
        match self.kind {
            TreeKind::NonOblivious | TreeKind::Oblivious => 1 << self.depth,
            TreeKind::DecisionList | TreeKind::ModifiedDecisionList => self.depth + 1,
        }
    }

    /// Number of leaves whose values are stored and trained.
    pub fn stored_leaf_count(&self) -> usize {
        match self.kind {
            TreeKind::ModifiedDecisionList => self.depth,
            _ => self.leaf_count(),
        }
    }

    /// Parameters per tree (the `P` of an `M x P` parameter matrix).
    pub fn params_per_tree(&self) -> usize {
        self.node_count() * (self.features + 1) + self.stored_leaf_count() * self.classes
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Parameters of a single tree.
///
/// `w` is stored node-major (`w[n * F + f]`), `pi` leaf-major
/// (`pi[l * C + c]`). The on-disk checkpoint uses the `F x N` and `C x L`
/// orientation instead.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub pi: Vec<f64>,
}

impl TreeParams {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        TreeParams {
            w: vec![0.0; spec.node_count() * spec.features],
            b: vec![0.0; spec.node_count()],
            pi: vec![0.0; spec.stored_leaf_count() * spec.classes],
        }
    }

    pub fn check_shape(&self, spec: &ArchitectureSpec) -> Result<()> {
        let n = spec.node_count();
        if self.w.len() != n * spec.features
            || self.b.len() != n
            || self.pi.len() != spec.stored_leaf_count() * spec.classes
        {
            return Err(Error::Shape(format!(
                "tree has w={}, b={}, pi={} entries; {:?} needs w={}, b={}, pi={}",
                self.w.len(),
                self.b.len(),
                self.pi.len(),
                spec,
                n * spec.features,
                n,
                spec.stored_leaf_count() * spec.classes
            )));
        }
        if !self.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("tree parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn node_weights(&self, node: usize, features: usize) -> &[f64] {
        &self.w[node * features..(node + 1) * features]
    }

    pub fn leaf_value(&self, leaf: usize, classes: usize) -> &[f64] {
        &self.pi[leaf * classes..(leaf + 1) * classes]
    }

    /// All parameters in `w, b, pi` order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(&self.b).chain(&self.pi)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut()).chain(self.pi.iter_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn dot(&self, other: &TreeParams) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleParams {
    pub spec: ArchitectureSpec,
    pub trees: Vec<TreeParams>,
}

impl EnsembleParams {
    pub fn zeros(spec: ArchitectureSpec) -> Self {
        EnsembleParams {
            spec,
            trees: (0..spec.trees).map(|_| TreeParams::zeros(&spec)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.trees.len() != self.spec.trees {
            return Err(Error::Shape(format!(
                "ensemble has {} trees, spec declares {}",
                self.trees.len(),
                self.spec.trees
            )));
        }
        self.trees.iter().try_for_each(|t| t.check_shape(&self.spec))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.trees.iter().flat_map(|t| t.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.trees.iter_mut().flat_map(|t| t.iter_mut())
    }
}

/// Uniform initialization: `w`, `b` on `[-1/sqrt(F), 1/sqrt(F)]`, leaf values
/// on `[-1/sqrt(L), 1/sqrt(L)]` with `L` the stored leaf count. Draw order is
/// tree by tree, `w` then `b` then `pi`.
pub fn init_params(spec: &ArchitectureSpec, seed: u64) -> Result<EnsembleParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_bound = 1.0 / (spec.features as f64).sqrt();
    let leaf_bound = 1.0 / (spec.stored_leaf_count() as f64).sqrt();
    let split_dist =
        Uniform::new_inclusive(-split_bound, split_bound).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let leaf_dist = Uniform::new_inclusive(-leaf_bound, leaf_bound).map_err(|e| Error::InvalidSpec(e.to_string()))?;

    let mut params = EnsembleParams::zeros(*spec);
    for tree in &mut params.trees {
        for v in tree.w.iter_mut().chain(tree.b.iter_mut()) {
            *v = split_dist.sample(&mut rng);
        }
        for v in &mut tree.pi {
            *v = leaf_dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One step on a root-to-leaf path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    /// Parameter slot of the splitting node.
    pub slot: usize,
    /// `true` if the path takes the right branch (`1 - sigmoid`).
    pub right: bool,
}

/// Root-to-leaf paths of an architecture, one per leaf (including the empty
/// leaf of the modified decision list).
#[derive(Clone, Debug)]
pub struct Layout {
    pub spec: ArchitectureSpec,
    pub paths: Vec<Vec<Step>>,
}

impl Layout {
    pub fn new(spec: &ArchitectureSpec) -> Self {
        let d = spec.depth;
        let paths = match spec.kind {
            TreeKind::NonOblivious => (0..1usize << d)
                .map(|leaf| {
                    let mut node = 0;
                    (0..d)
                        .map(|depth| {
                            let right = (leaf >> depth) & 1 == 1;
                            let step = Step { slot: node, right };
                            node = 2 * node + if right { 2 } else { 1 };
                            step
                        })
                        .collect()
                })
                .collect(),
            TreeKind::Oblivious => (0..1usize << d)
                .map(|leaf| {
                    (0..d)
                        .map(|depth| Step {
                            slot: depth,
                            right: (leaf >> depth) & 1 == 1,
                        })
                        .collect()
                })
                .collect(),
            TreeKind::DecisionList | TreeKind::ModifiedDecisionList => (0..=d)
                .map(|leaf| {
                    let mut path: Vec<Step> = (0..leaf.min(d)).map(|slot| Step { slot, right: true }).collect();
                    if leaf < d {
                        path.push(Step {
                            slot: leaf,
                            right: false,
                        });
                    }
                    path
                })
                .collect(),
        };
        Layout { spec: *spec, paths }
    }

    /// Left-branch probabilities `sigmoid(w_n·x + b_n)` for every slot.
    pub fn gates_into(&self, x: &[f64], tree: &TreeParams, gates: &mut [f64]) {
        let f = self.spec.features;
        for (n, g) in gates.iter_mut().enumerate() {
            let z = tree.b[n] + dot(&tree.w[n * f..(n + 1) * f], x);
            *g = sigmoid(z);
        }
    }

    /// Leaf flow given precomputed gates.
    pub fn flow_into(&self, gates: &[f64], flow: &mut [f64]) {
        for (mu, path) in flow.iter_mut().zip(&self.paths) {
            *mu = path
                .iter()
                .map(|s| {
                    let g = gates[s.slot];
                    if s.right {
                        1.0 - g
                    } else {
                        g
                    }
                })
                .product();
        }
    }

    /// Adds `sum_l flow[l] * pi[:, l]` to `out`; the unstored empty leaf adds nothing.
    pub fn accumulate_output(&self, flow: &[f64], tree: &TreeParams, out: &mut [f64]) {
        let c = self.spec.classes;
        for (leaf, &mu) in flow.iter().enumerate().take(self.spec.stored_leaf_count()) {
            for (o, p) in out.iter_mut().zip(&tree.pi[leaf * c..(leaf + 1) * c]) {
                *o += mu * p;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scratch buffers for repeated forward passes.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub gates: Vec<f64>,
    pub flow: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ArchitectureSpec) -> Self {
        Workspace {
            gates: vec![0.0; spec.node_count()],
            flow: vec![0.0; spec.leaf_count()],
        }
    }
}

/// Fraction of `x` reaching each leaf.
pub fn leaf_flow(x: &[f64], tree: &TreeParams, spec: &ArchitectureSpec) -> Vec<f64> {
    let layout = Layout::new(spec);
    let mut ws = Workspace::new(spec);
    layout.gates_into(x, tree, &mut ws.gates);
    layout.flow_into(&ws.gates, &mut ws.flow);
    ws.flow
}

/// Output of one tree: leaf values weighted by the leaf flow.
pub fn tree_forward(x: &[f64], tree: &TreeParams, spec: &ArchitectureSpec) -> Vec<f64> {
    let layout = Layout::new(spec);
    let mut ws = Workspace::new(spec);
    let mut out = vec![0.0; spec.classes];
    tree_forward_with(&layout, &mut ws, x, tree, &mut out);
    out
}

/// Adds the output of one tree to `out`.
pub fn tree_forward_with(layout: &Layout, ws: &mut Workspace, x: &[f64], tree: &TreeParams, out: &mut [f64]) {
    layout.gates_into(x, tree, &mut ws.gates);
    layout.flow_into(&ws.gates, &mut ws.flow);
    layout.accumulate_output(&ws.flow, tree, out);
}

/// Sum of all tree outputs, trees added in ascending index order.
pub fn ensemble_forward(x: &[f64], params: &EnsembleParams) -> Vec<f64> {
    let layout = Layout::new(&params.spec);
    let mut ws = Workspace::new(&params.spec);
    let mut out = vec![0.0; params.spec.classes];
    ensemble_forward_with(&layout, &mut ws, x, params, &mut out);
    out
}

pub fn ensemble_forward_with(layout: &Layout, ws: &mut Workspace, x: &[f64], params: &EnsembleParams, out: &mut [f64]) {
    out.fill(0.0);
    let mut tree_out = vec![0.0; out.len()];
    for tree in &params.trees {
        tree_out.fill(0.0);
        tree_forward_with(layout, ws, x, tree, &mut tree_out);
        for (o, t) in out.iter_mut().zip(&tree_out) {
            *o += t;
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `data`.
pub fn predict(params: &EnsembleParams, data: &Dataset) -> Vec<usize> {
    let layout = Layout::new(&params.spec);
    (0..data.len())
        .into_par_iter()
        .map_init(
            || (Workspace::new(&params.spec), vec![0.0; params.spec.classes]),
            |(ws, out), i| {
                ensemble_forward_with(&layout, ws, data.row(i), params, out);
                argmax(out)
            },
        )
        .collect()
}

/// Percentage of rows whose predicted class equals the label.
pub fn accuracy(params: &EnsembleParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.n_features() != params.spec.features {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            data.n_features(),
            params.spec.features
        )));
    }
    if let Some(&label) = data.labels().iter().find(|&&l| l >= params.spec.classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: params.spec.classes,
        });
    }
    let correct = predict(params, data)
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}
