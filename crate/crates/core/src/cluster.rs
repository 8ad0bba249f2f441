//! Hierarchical clustering: binary trees, Dasgupta cost, the continuous
//! triplet relaxation on the ball, tree decoding and tree metrics.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ball::{self, raw, BallError, BallPoint, TangentVector, EPS_BALL};
use crate::tape::{Bindings, Graph, NodeId, SimilaritySign, TripletWeights};

pub use crate::tape::{lca_depth_closed_form, LcaBranch};

/// Largest leaf count accepted by [`best_tree_bruteforce`].
pub const BRUTEFORCE_MAX_LEAVES: usize = 8;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("tree leaves do not match the {expected} indices of the similarity matrix")]
    LeafMismatch { expected: usize },
    #[error("similarity matrix is not square, symmetric and non-negative")]
    InvalidSimilarity,
    #[error("brute force refused for {0} leaves (limit {BRUTEFORCE_MAX_LEAVES})")]
    TooManyLeaves(usize),
    #[error("need at least 2 distinct labels, found {0}")]
    TooFewLabels(usize),
    #[error("all leaves belong to one class")]
    SingleClass,
    #[error("no triplets given")]
    EmptyTriplets,
    #[error("batch of {0} items cannot form a triplet")]
    BatchTooSmall(usize),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("tau must be positive")]
    InvalidTau,
    #[error(transparent)]
    Ball(#[from] BallError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TreeNode {
    Leaf(usize),
    Internal(usize, usize),
}

/// Rooted binary tree stored as an arena; leaves carry item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

impl ClusterTree {
    /// Builds and validates a tree from an arena and its root index.
    pub fn new(nodes: Vec<TreeNode>, root: usize) -> Result<Self, ClusterError> {
        let t = Self { nodes, root };
        t.validate()?;
        Ok(t)
    }

    pub fn single(item: usize) -> Self {
        Self { nodes: vec![TreeNode::Leaf(item)], root: 0 }
    }

    /// Joins two trees under a new root.
    pub fn join(left: &ClusterTree, right: &ClusterTree) -> Self {
        let mut nodes = left.nodes.clone();
        let off = nodes.len();
        nodes.extend(right.nodes.iter().map(|n| match *n {
            TreeNode::Leaf(i) => TreeNode::Leaf(i),
            TreeNode::Internal(a, b) => TreeNode::Internal(a + off, b + off),
        }));
        nodes.push(TreeNode::Internal(left.root, right.root + off));
        Self { root: nodes.len() - 1, nodes }
    }

    fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::InvalidTree(m.to_string()));
        if self.root >= self.nodes.len() {
            return bad("root out of range");
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        let mut items = Vec::new();
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                return bad("node reachable twice");
            }
            match self.nodes[n] {
                TreeNode::Leaf(i) => items.push(i),
                TreeNode::Internal(a, b) => {
                    if a >= self.nodes.len() || b >= self.nodes.len() {
                        return bad("child out of range");
                    }
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("unreachable node");
        }
        items.sort_unstable();
        if items.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate leaf id");
        }
        Ok(())
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> TreeNode {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf(_))).count()
    }

    pub fn num_internal(&self) -> usize {
        self.nodes.len() - self.num_leaves()
    }

    /// Leaf items in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(self.root, &mut |n| {
            if let TreeNode::Leaf(i) = n {
                out.push(i);
            }
        });
        out
    }

    fn walk(&self, n: usize, f: &mut impl FnMut(TreeNode)) {
        let node = self.nodes[n];
        f(node);
        if let TreeNode::Internal(a, b) = node {
            self.walk(a, f);
            self.walk(b, f);
        }
    }

    /// Leaf items under node `n`.
    pub fn leaves_under(&self, n: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(n, &mut |m| {
            if let TreeNode::Leaf(i) = m {
                out.push(i);
            }
        });
        out
    }

    /// Swaps the children of internal node `n`.
    pub fn swap_children(&mut self, n: usize) {
        if let TreeNode::Internal(a, b) = self.nodes[n] {
            self.nodes[n] = TreeNode::Internal(b, a);
        }
    }

    /// Sibling leaf pairs, each as `(min, max)`, sorted.
    pub fn cherries(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .filter_map(|n| match *n {
                TreeNode::Internal(a, b) => match (self.nodes[a], self.nodes[b]) {
                    (TreeNode::Leaf(x), TreeNode::Leaf(y)) => Some((x.min(y), x.max(y))),
                    _ => None,
                },
                TreeNode::Leaf(_) => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Parent index per node (`None` at the root) and depth per node.
    fn parents_and_depths(&self) -> (Vec<Option<usize>>, Vec<usize>) {
        let mut parent = vec![None; self.nodes.len()];
        let mut depth = vec![0; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if let TreeNode::Internal(a, b) = self.nodes[n] {
                for c in [a, b] {
                    parent[c] = Some(n);
                    depth[c] = depth[n] + 1;
                    stack.push(c);
                }
            }
        }
        (parent, depth)
    }

    /// Map from item id to its leaf node index.
    fn leaf_index(&self) -> HashMap<usize, usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                TreeNode::Leaf(item) => Some((*item, i)),
                TreeNode::Internal(..) => None,
            })
            .collect()
    }

    /// Number of edges on the path between the leaves holding items `i` and `j`.
    pub fn hops(&self, i: usize, j: usize) -> Option<usize> {
        let idx = self.leaf_index();
        let (parent, depth) = self.parents_and_depths();
        let (mut a, mut b) = (*idx.get(&i)?, *idx.get(&j)?);
        let mut h = 0;
        while depth[a] > depth[b] {
            a = parent[a]?;
            h += 1;
        }
        while depth[b] > depth[a] {
            b = parent[b]?;
            h += 1;
        }
        while a != b {
            a = parent[a]?;
            b = parent[b]?;
            h += 2;
        }
        Some(h)
    }

    /// All pairwise hop counts between leaves, indexed by leaf order of `items`.
    fn hop_matrix(&self, items: &[usize]) -> Vec<Vec<usize>> {
        let idx = self.leaf_index();
        let (parent, depth) = self.parents_and_depths();
        // Ancestor chains from each leaf to the root.
        let chains: Vec<Vec<usize>> = items
            .iter()
            .map(|it| {
                let mut c = vec![idx[it]];
                while let Some(p) = parent[*c.last().expect("non-empty")] {
                    c.push(p);
                }
                c
            })
            .collect();
        let n = items.len();
        let mut out = vec![vec![0; n]; n];
        for a in 0..n {
            for b in a + 1..n {
                let ca = &chains[a];
                let cb = &chains[b];
                let lca = ca.iter().find(|x| cb.contains(x)).expect("common root");
                let h = depth[ca[0]] + depth[cb[0]] - 2 * depth[*lca];
                out[a][b] = h;
                out[b][a] = h;
            }
        }
        out
    }

    /// Newick text with quoted labels and no branch lengths.
    pub fn to_newick(&self, label: impl Fn(usize) -> String) -> String {
        fn rec(t: &ClusterTree, n: usize, label: &dyn Fn(usize) -> String, out: &mut String) {
            match t.nodes[n] {
                TreeNode::Leaf(i) => {
                    out.push('\'');
                    out.push_str(&label(i).replace('\'', "''"));
                    out.push('\'');
                }
                TreeNode::Internal(a, b) => {
                    out.push('(');
                    rec(t, a, label, out);
                    out.push(',');
                    rec(t, b, label, out);
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        rec(self, self.root, &label, &mut s);
        s.push(';');
        s
    }

    /// JSON form: node ids, children, and per-leaf label and group.
    pub fn to_json(&self, label: impl Fn(usize) -> String, group: impl Fn(usize) -> Option<String>) -> serde_json::Value {
        let nodes: Vec<serde_json::Value> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| match *n {
                TreeNode::Leaf(i) => serde_json::json!({
                    "id": id, "item": i, "label": label(i), "group": group(i),
                }),
                TreeNode::Internal(a, b) => serde_json::json!({ "id": id, "children": [a, b] }),
            })
            .collect();
        serde_json::json!({ "root": self.root, "nodes": nodes })
    }
}

fn check_similarity(w: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let n = w.len();
    for (i, row) in w.iter().enumerate() {
        if row.len() != n {
            return Err(ClusterError::InvalidSimilarity);
        }
        for (j, v) in row.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) || (*v - w[j][i]).abs() > 1e-12 * v.abs().max(1.0) {
                return Err(ClusterError::InvalidSimilarity);
            }
        }
    }
    Ok(n)
}

/// `Σ_{i<j} w_ij · |leaves(lca(i, j))|`.
pub fn dasgupta_cost(tree: &ClusterTree, w: &[Vec<f64>]) -> Result<f64, ClusterError> {
    let n = check_similarity(w)?;
    let mut items = tree.leaves();
    items.sort_unstable();
    if items != (0..n).collect::<Vec<_>>() {
        return Err(ClusterError::LeafMismatch { expected: n });
    }
    Ok(cost_unchecked(tree, tree.root, w).1)
}

/// Returns (leaves under `n`, cost contributed inside the subtree).
fn cost_unchecked(tree: &ClusterTree, n: usize, w: &[Vec<f64>]) -> (Vec<usize>, f64) {
    match tree.nodes[n] {
        TreeNode::Leaf(i) => (vec![i], 0.0),
        TreeNode::Internal(a, b) => {
            let (la, ca) = cost_unchecked(tree, a, w);
            let (lb, cb) = cost_unchecked(tree, b, w);
            let cross: f64 = la.iter().flat_map(|&i| lb.iter().map(move |&j| w[i][j])).sum();
            let size = (la.len() + lb.len()) as f64;
            let mut leaves = la;
            leaves.extend(lb);
            (leaves, ca + cb + size * cross)
        }
    }
}

/// Enumerates every rooted binary tree on `n ≤ 8` leaves by sequential leaf
/// insertion and returns the first minimiser of the Dasgupta cost.
pub fn best_tree_bruteforce(w: &[Vec<f64>]) -> Result<(ClusterTree, f64), ClusterError> {
    let n = check_similarity(w)?;
    if n > BRUTEFORCE_MAX_LEAVES {
        return Err(ClusterError::TooManyLeaves(n));
    }
    if n < 2 {
        return Err(ClusterError::TooFewLabels(n));
    }
    let mut best: Option<(ClusterTree, f64)> = None;
    for_each_tree(n, &mut |t| {
        let c = cost_unchecked(t, t.root, w).1;
        if best.as_ref().is_none_or(|(_, b)| c < *b) {
            best = Some((t.clone(), c));
        }
    });
    Ok(best.expect("at least one tree"))
}

/// Calls `f` on each of the `(2n-3)!!` rooted binary trees over items `0..n`.
pub fn for_each_tree(n: usize, f: &mut impl FnMut(&ClusterTree)) {
    assert!(n >= 1);
    fn rec(t: &ClusterTree, next: usize, n: usize, f: &mut impl FnMut(&ClusterTree)) {
        if next == n {
            f(t);
            return;
        }
        for edge in 0..t.nodes.len() {
            rec(&insert_leaf(t, edge, next), next + 1, n, f);
        }
    }
    rec(&ClusterTree::single(0), 1, n, f);
}

/// Inserts `item` as the sibling of node `at` (the edge above `at`).
pub fn insert_leaf(t: &ClusterTree, at: usize, item: usize) -> ClusterTree {
    let mut nodes = t.nodes.clone();
    nodes.push(TreeNode::Leaf(item));
    let leaf = nodes.len() - 1;
    nodes.push(TreeNode::Internal(at, leaf));
    let joint = nodes.len() - 1;
    let mut root = t.root;
    if at == t.root {
        root = joint;
    } else {
        for n in nodes.iter_mut().take(t.nodes.len()) {
            if let TreeNode::Internal(a, b) = n {
                if *a == at {
                    *a = joint;
                } else if *b == at {
                    *b = joint;
                }
            }
        }
    }
    ClusterTree { nodes, root }
}

/// Uniform random binary tree over `items` by insertion at a uniformly chosen edge.
pub fn random_tree(items: &[usize], rng: &mut impl Rng) -> ClusterTree {
    assert!(!items.is_empty());
    let mut t = ClusterTree::single(items[0]);
    for &it in &items[1..] {
        let at = rng.random_range(0..t.nodes.len());
        t = insert_leaf(&t, at, it);
    }
    t
}

/// `e^{d_i/τ} / Σ_j e^{d_j/τ}`, max-subtracted.
pub fn scaled_softmax(d: &[f64], tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "tau must be positive");
    let mut out = vec![0.0; d.len()];
    crate::tape::softmax_into(d, tau, &mut out);
    out
}

/// Point at parameter `t` on the geodesic from `x` to `y`: `x ⊕ (t ⊗ ((-x) ⊕ y))`.
pub fn geodesic_point(c: f64, x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let dir = raw::mobius_add(c, &neg, y);
    raw::mobius_add(c, x, &raw::mobius_scalar_mul(c, t, &dir))
}

/// Minimum distance to the origin along the geodesic segment between `x` and `y`,
/// by golden-section search on the geodesic parameter to tolerance `1e-8`.
pub fn lca_depth(x: &BallPoint, y: &BallPoint) -> Result<f64, ClusterError> {
    if x.dim() != y.dim() {
        return Err(BallError::DimensionMismatch { left: x.dim(), right: y.dim() }.into());
    }
    if x.curvature() != y.curvature() {
        return Err(BallError::CurvatureMismatch { left: x.curvature().get(), right: y.curvature().get() }.into());
    }
    let c = x.curvature().get();
    let f = |t: f64| raw::dist_to_origin(c, &geodesic_point(c, x.coords(), y.coords(), t));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut p = b - inv_phi * (b - a);
    let mut q = a + inv_phi * (b - a);
    let (mut fp, mut fq) = (f(p), f(q));
    while b - a > 1e-8 {
        if fp <= fq {
            b = q;
            q = p;
            fq = fp;
            p = b - inv_phi * (b - a);
            fp = f(p);
        } else {
            a = p;
            p = q;
            fp = fq;
            q = a + inv_phi * (b - a);
            fq = f(q);
        }
    }
    Ok(f(0.5 * (a + b)).min(f(0.0)).min(f(1.0)))
}

/// Which vectors the clustering loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySource {
    #[default]
    Logits,
    Latent,
    Input,
}

impl std::str::FromStr for SimilaritySource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logits" => Ok(Self::Logits),
            "latent" => Ok(Self::Latent),
            "input" => Ok(Self::Input),
            _ => Err(format!("unknown similarity source `{s}`")),
        }
    }
}

/// Layer whose points are organised into the tree during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeLayer {
    #[default]
    Logits,
    Latent,
}

impl std::str::FromStr for TreeLayer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logits" => Ok(Self::Logits),
            "latent" => Ok(Self::Latent),
            _ => Err(format!("unknown tree layer `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityConfig {
    pub tau: f64,
    pub source: SimilaritySource,
    pub sign: SimilaritySign,
    pub layer: TreeLayer,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { tau: 0.1, source: SimilaritySource::Logits, sign: SimilaritySign::Negative, layer: TreeLayer::Logits }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// `count` uniformly random triples of distinct indices below `batch_size`.
pub fn sample_triplets(batch_size: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<Triplet>, ClusterError> {
    if batch_size < 3 {
        return Err(ClusterError::BatchTooSmall(batch_size));
    }
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..batch_size);
            let mut j = rng.random_range(0..batch_size - 1);
            if j >= i {
                j += 1;
            }
            let (lo, hi) = (i.min(j), i.max(j));
            let mut k = rng.random_range(0..batch_size - 2);
            if k >= lo {
                k += 1;
            }
            if k >= hi {
                k += 1;
            }
            Triplet { i, j, k }
        })
        .collect())
}

/// All `C(n, 3)` triplets in lexicographic order.
pub fn all_triplets(n: usize) -> Vec<Triplet> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                out.push(Triplet { i, j, k });
            }
        }
    }
    out
}

/// Geometry used to measure pair distances and LCA depths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Hyperbolic { c: f64 },
    Euclidean,
}

/// How pair weights are obtained inside [`add_tree_loss`].
#[derive(Debug, Clone)]
pub enum PairWeights<'a> {
    /// Scaled softmax of signed distances between the tree points.
    Learned(SimilaritySign),
    /// Scaled softmax of signed distances between rows of another embedding
    /// of the same items, measured in the same geometry.
    LearnedFrom(NodeId, SimilaritySign),
    /// Fixed similarities indexed by item id.
    Matrix(&'a [Vec<f64>]),
}

/// Adds the triplet clustering loss over rows of `points` to `g`. Pair
/// distances and LCA depths are computed once per distinct pair.
pub fn add_tree_loss(
    g: &mut Graph,
    points: NodeId,
    triplets: &[Triplet],
    tau: f64,
    geometry: Geometry,
    weights: PairWeights<'_>,
) -> Result<NodeId, ClusterError> {
    if triplets.is_empty() {
        return Err(ClusterError::EmptyTriplets);
    }
    if !(tau > 0.0) {
        return Err(ClusterError::InvalidTau);
    }
    let n = g.shape(points).rows;
    let mut pair_index = vec![usize::MAX; n * n];
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut pair = |a: usize, b: usize| -> usize {
        let (lo, hi) = (a.min(b), a.max(b));
        let slot = &mut pair_index[lo * n + hi];
        if *slot == usize::MAX {
            left.push(lo);
            right.push(hi);
            *slot = left.len() - 1;
        }
        *slot
    };
    let idx: Vec<[usize; 3]> = triplets.iter().map(|t| [pair(t.i, t.j), pair(t.i, t.k), pair(t.j, t.k)]).collect();
    let dist = |g: &mut Graph, xi: NodeId, xj: NodeId| match geometry {
        Geometry::Hyperbolic { c } => g.dist(xi, xj, c),
        Geometry::Euclidean => {
            let diff = g.sub(xi, xj);
            g.row_norm(diff)
        }
    };
    let xi = g.gather(points, left.clone());
    let xj = g.gather(points, right.clone());
    let l = match geometry {
        Geometry::Hyperbolic { c } => g.lca_depth(xi, xj, c),
        Geometry::Euclidean => g.segment_min_norm(xi, xj),
    };
    let (d, tw) = match weights {
        PairWeights::Learned(sign) => (dist(g, xi, xj), TripletWeights::Softmax(sign)),
        PairWeights::LearnedFrom(other, sign) => {
            assert_eq!(g.shape(other).rows, n, "similarity embedding must cover the same items");
            let si = g.gather(other, left);
            let sj = g.gather(other, right);
            (dist(g, si, sj), TripletWeights::Softmax(sign))
        }
        PairWeights::Matrix(w) => (
            dist(g, xi, xj),
            TripletWeights::Fixed(triplets.iter().map(|t| [w[t.i][t.j], w[t.i][t.k], w[t.j][t.k]]).collect()),
        ),
    };
    Ok(g.triplet_loss(d, l, idx, tau, tw))
}

fn points_matrix(points: &[BallPoint]) -> Result<(Vec<f64>, usize, f64), ClusterError> {
    let first = points.first().ok_or(ClusterError::BatchTooSmall(0))?;
    let (dim, c) = (first.dim(), first.curvature());
    let mut flat = Vec::with_capacity(points.len() * dim);
    for p in points {
        if p.dim() != dim {
            return Err(BallError::DimensionMismatch { left: dim, right: p.dim() }.into());
        }
        if p.curvature() != c {
            return Err(BallError::CurvatureMismatch { left: c.get(), right: p.curvature().get() }.into());
        }
        flat.extend_from_slice(p.coords());
    }
    Ok((flat, dim, c.get()))
}

fn eval_tree_loss(points: &[BallPoint], triplets: &[Triplet], tau: f64, weights: PairWeights<'_>) -> Result<f64, ClusterError> {
    let (flat, dim, c) = points_matrix(points)?;
    let mut g = Graph::new();
    let x = g.constant(points.len(), dim, &flat);
    let out = add_tree_loss(&mut g, x, triplets, tau, Geometry::Hyperbolic { c }, weights)?;
    g.set_output(out);
    Ok(g.forward(&Bindings::new()).expect("constant graph evaluates"))
}

/// Mean over triplets of `(w_ij + w_ik + w_jk - w_ijk) + 2(w_ij + w_ik + w_jk)`.
pub fn tree_loss(points: &[BallPoint], triplets: &[Triplet], cfg: &SimilarityConfig) -> Result<f64, ClusterError> {
    eval_tree_loss(points, triplets, cfg.tau, PairWeights::Learned(cfg.sign))
}

/// [`tree_loss`] with pair similarities taken from a fixed matrix.
pub fn tree_loss_with_similarity(
    points: &[BallPoint],
    triplets: &[Triplet],
    w: &[Vec<f64>],
    tau: f64,
) -> Result<f64, ClusterError> {
    check_similarity(w)?;
    eval_tree_loss(points, triplets, tau, PairWeights::Matrix(w))
}

/// The bracketed per-triplet term `w_ij + w_ik + w_jk - w_ijk` for each triplet.
pub fn triplet_terms(points: &[BallPoint], triplets: &[Triplet], cfg: &SimilarityConfig) -> Result<Vec<f64>, ClusterError> {
    if triplets.is_empty() {
        return Err(ClusterError::EmptyTriplets);
    }
    let c = points.first().ok_or(ClusterError::BatchTooSmall(0))?.curvature().get();
    let sgn = match cfg.sign {
        SimilaritySign::Negative => -1.0,
        SimilaritySign::Literal => 1.0,
    };
    Ok(triplets
        .iter()
        .map(|t| {
            let pairs = [(t.i, t.j), (t.i, t.k), (t.j, t.k)];
            let d: Vec<f64> = pairs.iter().map(|&(a, b)| sgn * raw::dist_acosh(c, points[a].coords(), points[b].coords())).collect();
            let l: Vec<f64> = pairs
                .iter()
                .map(|&(a, b)| lca_depth_closed_form(c, points[a].coords(), points[b].coords()).0)
                .collect();
            let w = scaled_softmax(&d, cfg.tau);
            let s = scaled_softmax(&l, cfg.tau);
            let wijk: f64 = w.iter().zip(&s).map(|(a, b)| a * b).sum();
            w.iter().sum::<f64>() - wijk
        })
        .collect())
}

/// Tree decoded from labelled points, with leaves carrying label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTree {
    pub tree: ClusterTree,
    /// Boundary-projected class representative per label id (empty if absent).
    pub representatives: Vec<Vec<f64>>,
}

fn tangent_mean(c: f64, pts: &[&[f64]]) -> Vec<f64> {
    let dim = pts[0].len();
    let mut m = vec![0.0; dim];
    for p in pts {
        let v = raw::log0(c, p).expect("points are inside the ball");
        m.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= pts.len() as f64);
    m
}

/// Averages points per label in the tangent space, pushes each mean radially
/// to the edge of the safe ball, then merges greedily by minimum hyperbolic
/// distance. A merged cluster is represented by the tangent-space mean of its
/// members, pushed to the same radius so that all comparisons are angular.
pub fn decode_tree(points: &[BallPoint], labels: &[usize]) -> Result<DecodedTree, ClusterError> {
    assert_eq!(points.len(), labels.len(), "one label per point");
    let (_, _, c) = points_matrix(points)?;
    let curv = points[0].curvature();
    let target = (1.0 - EPS_BALL) / c.sqrt();
    let radial = |v: Vec<f64>| {
        let n = raw::norm(&v);
        if n > 0.0 { v.iter().map(|x| x / n * target).collect() } else { v }
    };
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut reps = vec![Vec::new(); n_labels];
    let mut present = Vec::new();
    for lab in 0..n_labels {
        let members: Vec<&[f64]> = points.iter().zip(labels).filter(|(_, l)| **l == lab).map(|(p, _)| p.coords()).collect();
        if members.is_empty() {
            continue;
        }
        reps[lab] = radial(ball::exp0(&TangentVector(tangent_mean(c, &members)), curv).into_coords());
        present.push(lab);
    }
    if present.len() < 2 {
        return Err(ClusterError::TooFewLabels(present.len()));
    }
    struct Active {
        tree: ClusterTree,
        members: Vec<usize>,
        rep: Vec<f64>,
    }
    let mut active: Vec<Active> =
        present.iter().map(|&l| Active { tree: ClusterTree::single(l), members: vec![l], rep: reps[l].clone() }).collect();
    while active.len() > 1 {
        let mut best = (f64::INFINITY, 0, 1);
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let d = raw::dist_acosh(c, &active[a].rep, &active[b].rep);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let right = active.remove(b);
        let left = active.remove(a);
        let mut members = left.members;
        members.extend(right.members);
        let member_reps: Vec<&[f64]> = members.iter().map(|&m| reps[m].as_slice()).collect();
        let rep = radial(raw::exp0(c, &tangent_mean(c, &member_reps)));
        active.insert(a, Active { tree: ClusterTree::join(&left.tree, &right.tree), members, rep });
    }
    Ok(DecodedTree { tree: active.pop().expect("one cluster").tree, representatives: reps })
}

/// `Σ_{same class} hops / Σ_{different class} hops` over unordered leaf pairs.
/// `class_of` maps each leaf item to its class.
pub fn distortion(tree: &ClusterTree, class_of: impl Fn(usize) -> usize) -> Result<f64, ClusterError> {
    let items = tree.leaves();
    let hops = tree.hop_matrix(&items);
    let classes: Vec<usize> = items.iter().map(|&i| class_of(i)).collect();
    let (mut same, mut diff) = (0usize, 0usize);
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            if classes[a] == classes[b] {
                same += hops[a][b];
            } else {
                diff += hops[a][b];
            }
        }
    }
    if diff == 0 {
        return Err(ClusterError::SingleClass);
    }
    Ok(same as f64 / diff as f64)
}

/// Sum of hyperbolic distances over same-class unordered pairs.
pub fn distance_constraint(points: &[BallPoint], classes: &[usize]) -> f64 {
    assert_eq!(points.len(), classes.len(), "one class per point");
    let mut total = 0.0;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            if classes[a] == classes[b] {
                let c = points[a].curvature().get();
                total += raw::dist_acosh(c, points[a].coords(), points[b].coords());
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ball::Curvature;

    fn leaf(i: usize) -> ClusterTree {
        ClusterTree::single(i)
    }

    fn j(a: &ClusterTree, b: &ClusterTree) -> ClusterTree {
        ClusterTree::join(a, b)
    }

    fn pt(v: &[f64]) -> BallPoint {
        BallPoint::new(v.to_vec(), Curvature::new(1.0).unwrap()).unwrap()
    }

    #[test]
    fn dasgupta_examples() {
        let mut w = vec![vec![0.0; 3]; 3];
        w[0][1] = 1.0;
        w[1][0] = 1.0;
        let t12 = j(&j(&leaf(0), &leaf(1)), &leaf(2));
        let t13 = j(&j(&leaf(0), &leaf(2)), &leaf(1));
        assert_eq!(dasgupta_cost(&t12, &w).unwrap(), 2.0);
        assert_eq!(dasgupta_cost(&t13, &w).unwrap(), 3.0);
        assert_eq!(dasgupta_cost(&t13, &vec![vec![0.0; 3]; 3]).unwrap(), 0.0);
        let (best, cost) = best_tree_bruteforce(&w).unwrap();
        assert_eq!(cost, 2.0);
        assert_eq!(best.cherries(), vec![(0, 1)]);
        assert!(matches!(dasgupta_cost(&t12, &vec![vec![0.0; 4]; 4]), Err(ClusterError::LeafMismatch { .. })));
    }

    #[test]
    fn bruteforce_blocks_and_pair() {
        let mut w = vec![vec![0.0; 4]; 4];
        for (a, b) in [(0, 1), (2, 3)] {
            w[a][b] = 1.0;
            w[b][a] = 1.0;
        }
        let (t, c) = best_tree_bruteforce(&w).unwrap();
        assert_eq!(c, 4.0);
        assert_eq!(t.cherries(), vec![(0, 1), (2, 3)]);
        let (t, c) = best_tree_bruteforce(&[vec![0.0, 0.7], vec![0.7, 0.0]]).unwrap();
        assert_eq!((t.num_leaves(), c), (2, 1.4));
        assert!(matches!(best_tree_bruteforce(&vec![vec![0.0; 9]; 9]), Err(ClusterError::TooManyLeaves(9))));
    }

    #[test]
    fn tree_enumeration_counts() {
        for (n, expected) in [(2, 1), (3, 3), (4, 15), (5, 105), (6, 945)] {
            let mut count = 0;
            for_each_tree(n, &mut |t| {
                assert_eq!(t.num_leaves(), n);
                assert_eq!(t.num_internal(), n - 1);
                count += 1;
            });
            assert_eq!(count, expected);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = scaled_softmax(&[2f64.ln(), 0.0], 1.0);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = scaled_softmax(&[1.0, 0.0, 0.0], 1e-3);
        assert!(s[0] > 1.0 - 1e-12);
        assert_eq!(scaled_softmax(&[0.5; 4], 0.3), vec![0.25; 4]);
    }

    #[test]
    fn lca_depth_examples() {
        let x = pt(&[0.3, -0.4]);
        assert!((lca_depth(&x, &x).unwrap() - ball::dist_to_origin(&x)).abs() < 1e-12);
        assert!(lca_depth(&x, &x.neg()).unwrap() < 1e-7);
        let (a, b) = (pt(&[0.5, 0.0]), pt(&[0.0, 0.5]));
        let v = lca_depth(&a, &b).unwrap();
        assert!(v < ball::dist_to_origin(&a));
        let closed = lca_depth_closed_form(1.0, a.coords(), b.coords()).0;
        assert!((v - closed).abs() < 1e-9, "{v} vs {closed}");
    }

    #[test]
    fn coincident_triplet_terms() {
        let p = pt(&[0.2, 0.1]);
        let pts = vec![p.clone(), p.clone(), p];
        let t = [Triplet { i: 0, j: 1, k: 2 }];
        let cfg = SimilarityConfig::default();
        let terms = triplet_terms(&pts, &t, &cfg).unwrap();
        assert!((terms[0] - 2.0 / 3.0).abs() < 1e-12);
        let total = tree_loss(&pts, &t, &cfg).unwrap();
        assert!((total - (2.0 / 3.0 + 2.0)).abs() < 1e-12);
        assert!(matches!(tree_loss(&pts, &[], &cfg), Err(ClusterError::EmptyTriplets)));
    }

    #[test]
    fn triplet_sampling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = sample_triplets(3, 5, &mut rng).unwrap();
        for tr in &t {
            let mut v = [tr.i, tr.j, tr.k];
            v.sort_unstable();
            assert_eq!(v, [0, 1, 2]);
        }
        assert!(matches!(sample_triplets(2, 1, &mut rng), Err(ClusterError::BatchTooSmall(2))));
    }

    #[test]
    fn distortion_examples() {
        // items 0,1 = class A; 2,3 = class B
        let class = |i: usize| i / 2;
        let aligned = j(&j(&leaf(0), &leaf(1)), &j(&leaf(2), &leaf(3)));
        let mixed = j(&j(&leaf(0), &leaf(2)), &j(&leaf(1), &leaf(3)));
        assert!((distortion(&aligned, class).unwrap() - 0.25).abs() < 1e-15);
        assert!((distortion(&mixed, class).unwrap() - 8.0 / 12.0).abs() < 1e-15);
        assert!(matches!(distortion(&aligned, |_| 0), Err(ClusterError::SingleClass)));
    }

    #[test]
    fn decode_two_pairs() {
        let pts = vec![pt(&[0.5, 0.01]), pt(&[0.5, -0.01]), pt(&[-0.5, 0.01]), pt(&[-0.5, -0.01])];
        let d = decode_tree(&pts, &[0, 1, 2, 3]).unwrap();
        assert_eq!(d.tree.cherries(), vec![(0, 1), (2, 3)]);
        let d = decode_tree(&pts[..2], &[0, 1]).unwrap();
        assert_eq!(d.tree.num_leaves(), 2);
        assert!(matches!(decode_tree(&pts[..2], &[0, 0]), Err(ClusterError::TooFewLabels(1))));
    }

    #[test]
    fn constraint_examples() {
        let pts = vec![pt(&[0.0, 0.0]), pt(&[0.6, 0.0]), pt(&[0.1, 0.3])];
        assert!((distance_constraint(&pts[..2], &[0, 0]) - 4f64.ln()).abs() < 1e-12);
        assert!((distance_constraint(&pts, &[0, 0, 1]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(distance_constraint(&[pts[0].clone(), pts[0].clone()], &[0, 0]), 0.0);
    }

    #[test]
    fn newick_and_json() {
        let t = j(&j(&leaf(0), &leaf(1)), &leaf(2));
        let names = ["g", "k", "it's"];
        assert_eq!(t.to_newick(|i| names[i].to_string()), "(('g','k'),'it''s');");
        let v = t.to_json(|i| names[i].to_string(), |_| Some("TDS".into()));
        assert_eq!(v["nodes"].as_array().unwrap().len(), 5);
    }
}
