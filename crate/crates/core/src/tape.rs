//! Reverse-mode differentiation over a fixed set of row-wise primitives.
//!
//! A [`Graph`] is built symbolically: every node has a static shape
//! `(rows, cols)` and ball-valued primitives act on each row as one point.
//! Named inputs are bound at [`Graph::forward`]; [`Graph::backward`] then
//! returns the gradient of the scalar output with respect to every input.
//!
//! Möbius, exp/log, distance, MLR and LCA-depth primitives carry closed-form
//! vector-Jacobian products. [`check_gradient`] compares them against central
//! differences.

use std::collections::HashMap;

use thiserror::Error;

use crate::ball::raw::{self, acosh1p, dot, norm, norm_sq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("binding for `{name}` has {got} values, expected {expected}")]
    BindingShape { name: String, expected: usize, got: usize },
    #[error("graph has no output node")]
    NoOutput,
    #[error("output node has shape {0}x{1}, expected a scalar")]
    NonScalarOutput(usize, usize),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("log0 argument outside the ball at node {0}")]
    Domain(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Sign applied to distances before the similarity softmax of the triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilaritySign {
    /// `softmax(-d/τ)`: similarity decreases with distance.
    Negative,
    /// `softmax(d/τ)`: the formula read literally.
    Literal,
}

/// Per-triplet pair weights: learned from distances or fixed from a similarity matrix.
#[derive(Debug, Clone)]
pub enum TripletWeights {
    Softmax(SimilaritySign),
    Fixed(Vec<[f64; 3]>),
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Linear(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Atanh(NodeId),
    Asinh(NodeId),
    Arccosh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSqNorm(NodeId),
    RowNorm(NodeId),
    Gather(NodeId, Vec<usize>),
    MobiusAdd { x: NodeId, y: NodeId, c: f64, project: bool },
    MobiusScalar { x: NodeId, r: f64, c: f64 },
    Exp0 { x: NodeId, c: f64 },
    Log0 { x: NodeId, c: f64 },
    Project { x: NodeId, c: f64 },
    Softmax(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    HypMlr { x: NodeId, a: NodeId, p: NodeId, c: f64 },
    Dist { x: NodeId, y: NodeId, c: f64 },
    DistToOrigin { x: NodeId, c: f64 },
    LcaDepth { x: NodeId, y: NodeId, c: f64 },
    SegmentMinNorm(NodeId, NodeId),
    TripletLoss { d: NodeId, l: NodeId, triplets: Vec<[usize; 3]>, tau: f64, weights: TripletWeights },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    offset: usize,
    requires_grad: bool,
}

/// Gradients of the output keyed by input name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap(pub HashMap<String, Vec<f64>>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Values for the graph's named inputs.
#[derive(Debug, Clone, Default)]
pub struct Bindings(HashMap<String, Vec<f64>>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, values: Vec<f64>) -> &mut Self {
        self.0.insert(name.into(), values);
        self
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.bind(name, values);
        self
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.0.get_mut(name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<f64>,
    grads: Vec<f64>,
    output: Option<NodeId>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, n: NodeId) -> Shape {
        self.nodes[n.0].shape
    }

    fn push(&mut self, op: Op, shape: Shape, requires_grad: bool) -> NodeId {
        let offset = self.values.len();
        self.values.resize(offset + shape.len(), 0.0);
        self.nodes.push(Node { op, shape, offset, requires_grad });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|n| self.nodes[n.0].requires_grad)
    }

    fn unary(&mut self, x: NodeId, op: Op) -> NodeId {
        let shape = self.shape(x);
        let rg = self.rg(&[x]);
        self.push(op, shape, rg)
    }

    fn rowwise_scalar(&mut self, ids: &[NodeId], op: Op) -> NodeId {
        let rows = self.shape(ids[0]).rows;
        let rg = self.rg(ids);
        self.push(op, Shape::new(rows, 1), rg)
    }

    fn same_shape(&self, a: NodeId, b: NodeId) {
        assert_eq!(self.shape(a), self.shape(b), "shape mismatch between {a:?} and {b:?}");
    }

    /// A named input; its gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input(name.to_string()), Shape::new(rows, cols), true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: &[f64]) -> NodeId {
        assert_eq!(values.len(), rows * cols, "constant size mismatch");
        let id = self.push(Op::Constant, Shape::new(rows, cols), false);
        let off = self.nodes[id.0].offset;
        self.values[off..off + values.len()].copy_from_slice(values);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), self.shape(a), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), self.shape(a), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b);
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), self.shape(a), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::Scale(a, s))
    }

    /// Rows of `x` (b×d) times `wᵀ` (w is l×d) → b×l.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert_eq!(sx.cols, sw.cols, "linear: input width {} vs weight width {}", sx.cols, sw.cols);
        let rg = self.rg(&[x, w]);
        self.push(Op::Linear(x, w), Shape::new(sx.rows, sw.rows), rg)
    }

    /// Adds the 1×l row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        assert!(sb.rows == 1 && sb.cols == sx.cols, "add_bias: bias must be 1x{}", sx.cols);
        let rg = self.rg(&[x, bias]);
        self.push(Op::AddBias(x, bias), sx, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a))
    }

    pub fn atanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Atanh(a))
    }

    pub fn asinh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Asinh(a))
    }

    pub fn arccosh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Arccosh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Shape::new(1, 1), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Shape::new(1, 1), rg)
    }

    pub fn row_sq_norm(&mut self, a: NodeId) -> NodeId {
        self.rowwise_scalar(&[a], Op::RowSqNorm(a))
    }

    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        self.rowwise_scalar(&[a], Op::RowNorm(a))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        let s = self.shape(a);
        assert!(rows.iter().all(|&r| r < s.rows), "gather: row index out of range");
        let rg = self.rg(&[a]);
        let shape = Shape::new(rows.len(), s.cols);
        self.push(Op::Gather(a, rows), shape, rg)
    }

    /// Row-wise `x ⊕_c y`; with `project` the result is clipped into the safe ball.
    pub fn mobius_add(&mut self, x: NodeId, y: NodeId, c: f64, project: bool) -> NodeId {
        self.same_shape(x, y);
        let rg = self.rg(&[x, y]);
        self.push(Op::MobiusAdd { x, y, c, project }, self.shape(x), rg)
    }

    pub fn mobius_scalar(&mut self, x: NodeId, r: f64, c: f64) -> NodeId {
        self.unary(x, Op::MobiusScalar { x, r, c })
    }

    /// Row-wise exponential map at the origin, clipped into the safe ball.
    pub fn exp0(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Exp0 { x, c })
    }

    pub fn log0(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Log0 { x, c })
    }

    pub fn project(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Project { x, c })
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softmax(a))
    }

    /// Per-row `-log softmax(logits)[label]`, computed with max subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let s = self.shape(logits);
        assert_eq!(labels.len(), s.rows, "cross_entropy: one label per row");
        assert!(labels.iter().all(|&l| l < s.cols), "cross_entropy: label out of range");
        self.rowwise_scalar(&[logits], Op::CrossEntropy(logits, labels))
    }

    /// Hyperbolic multiclass logistic regression: `x` is b×l, `a` and `p` are K×l.
    pub fn hyp_mlr(&mut self, x: NodeId, a: NodeId, p: NodeId, c: f64) -> NodeId {
        let (sx, sa, sp) = (self.shape(x), self.shape(a), self.shape(p));
        assert_eq!(sa, sp, "hyp_mlr: a and p must share shape");
        assert_eq!(sx.cols, sa.cols, "hyp_mlr: latent width mismatch");
        let rg = self.rg(&[x, a, p]);
        self.push(Op::HypMlr { x, a, p, c }, Shape::new(sx.rows, sa.rows), rg)
    }

    /// Row-wise geodesic distance.
    pub fn dist(&mut self, x: NodeId, y: NodeId, c: f64) -> NodeId {
        self.same_shape(x, y);
        self.rowwise_scalar(&[x, y], Op::Dist { x, y, c })
    }

    pub fn dist_to_origin(&mut self, x: NodeId, c: f64) -> NodeId {
        self.rowwise_scalar(&[x], Op::DistToOrigin { x, c })
    }

    /// Row-wise distance from the origin to the geodesic segment between `x` and `y`.
    pub fn lca_depth(&mut self, x: NodeId, y: NodeId, c: f64) -> NodeId {
        self.same_shape(x, y);
        self.rowwise_scalar(&[x, y], Op::LcaDepth { x, y, c })
    }

    /// Euclidean counterpart of [`Graph::lca_depth`]: min norm over the segment.
    pub fn segment_min_norm(&mut self, x: NodeId, y: NodeId) -> NodeId {
        self.same_shape(x, y);
        self.rowwise_scalar(&[x, y], Op::SegmentMinNorm(x, y))
    }

    /// Mean over triplets of `(w_ij + w_ik + w_jk - w·softmax(l/τ)) + 2(w_ij + w_ik + w_jk)`.
    ///
    /// `d` and `l` are P×1 columns of pair distances and pair LCA depths; each
    /// triplet lists the indices of its pairs `(ij, ik, jk)` into those columns.
    pub fn triplet_loss(
        &mut self,
        d: NodeId,
        l: NodeId,
        triplets: Vec<[usize; 3]>,
        tau: f64,
        weights: TripletWeights,
    ) -> NodeId {
        self.same_shape(d, l);
        let p = self.shape(d).rows;
        assert!(!triplets.is_empty(), "triplet_loss: no triplets");
        assert!(tau > 0.0, "triplet_loss: tau must be positive");
        assert!(triplets.iter().flatten().all(|&i| i < p), "triplet_loss: pair index out of range");
        if let TripletWeights::Fixed(w) = &weights {
            assert_eq!(w.len(), triplets.len(), "triplet_loss: one weight triple per triplet");
        }
        let rg = self.rg(&[d, l]);
        self.push(Op::TripletLoss { d, l, triplets, tau, weights }, Shape::new(1, 1), rg)
    }

    pub fn set_output(&mut self, n: NodeId) {
        self.output = Some(n);
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        let node = &self.nodes[n.0];
        &self.values[node.offset..node.offset + node.shape.len()]
    }

    /// Gradient of the output with respect to node `n` after [`Graph::backward`].
    pub fn grad(&self, n: NodeId) -> Option<&[f64]> {
        let node = &self.nodes[n.0];
        self.grads.get(node.offset..node.offset + node.shape.len())
    }

    pub fn input_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn forward(&mut self, bindings: &Bindings) -> Result<f64, TapeError> {
        let out = self.output.ok_or(TapeError::NoOutput)?;
        let os = self.shape(out);
        if os.len() != 1 {
            return Err(TapeError::NonScalarOutput(os.rows, os.cols));
        }
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            self.eval_node(i, bindings)?;
        }
        self.evaluated = true;
        Ok(self.values[self.nodes[out.0].offset])
    }

    fn eval_node(&mut self, i: usize, bindings: &Bindings) -> Result<(), TapeError> {
        let node = &self.nodes[i];
        let (off, shape) = (node.offset, node.shape);
        let (before, rest) = self.values.split_at_mut(off);
        let out = &mut rest[..shape.len()];
        let nodes = &self.nodes;
        let val = |n: &NodeId| -> &[f64] {
            let m = &nodes[n.0];
            &before[m.offset..m.offset + m.shape.len()]
        };
        match &node.op {
            Op::Input(name) => {
                let v = bindings.get(name).ok_or_else(|| TapeError::UnboundInput(name.clone()))?;
                if v.len() != out.len() {
                    return Err(TapeError::BindingShape {
                        name: name.clone(),
                        expected: out.len(),
                        got: v.len(),
                    });
                }
                out.copy_from_slice(v);
            }
            Op::Constant => {}
            Op::Add(a, b) => zip2(out, val(a), val(b), |x, y| x + y),
            Op::Sub(a, b) => zip2(out, val(a), val(b), |x, y| x - y),
            Op::Mul(a, b) => zip2(out, val(a), val(b), |x, y| x * y),
            Op::Neg(a) => map1(out, val(a), |x| -x),
            Op::Scale(a, s) => map1(out, val(a), |x| x * s),
            Op::Linear(x, w) => {
                let (xv, wv) = (val(x), val(w));
                let d = nodes[x.0].shape.cols;
                let l = shape.cols;
                for (xr, orow) in xv.chunks_exact(d).zip(out.chunks_exact_mut(l)) {
                    for (o, wr) in orow.iter_mut().zip(wv.chunks_exact(d)) {
                        *o = dot(xr, wr);
                    }
                }
            }
            Op::AddBias(x, b) => {
                let bv = val(b);
                for (orow, xr) in out.chunks_exact_mut(shape.cols).zip(val(x).chunks_exact(shape.cols)) {
                    zip2(orow, xr, bv, |p, q| p + q);
                }
            }
            Op::Relu(a) => map1(out, val(a), |x| x.max(0.0)),
            Op::Tanh(a) => map1(out, val(a), f64::tanh),
            Op::Atanh(a) => map1(out, val(a), f64::atanh),
            Op::Asinh(a) => map1(out, val(a), f64::asinh),
            Op::Arccosh(a) => map1(out, val(a), f64::acosh),
            Op::Exp(a) => map1(out, val(a), f64::exp),
            Op::Log(a) => map1(out, val(a), f64::ln),
            Op::Sum(a) => out[0] = val(a).iter().sum(),
            Op::Mean(a) => {
                let v = val(a);
                out[0] = v.iter().sum::<f64>() / v.len() as f64;
            }
            Op::RowSqNorm(a) => {
                let cols = nodes[a.0].shape.cols;
                for (o, r) in out.iter_mut().zip(val(a).chunks_exact(cols)) {
                    *o = norm_sq(r);
                }
            }
            Op::RowNorm(a) => {
                let cols = nodes[a.0].shape.cols;
                for (o, r) in out.iter_mut().zip(val(a).chunks_exact(cols)) {
                    *o = norm(r);
                }
            }
            Op::Gather(a, rows) => {
                let v = val(a);
                let cols = shape.cols;
                for (orow, &r) in out.chunks_exact_mut(cols).zip(rows) {
                    orow.copy_from_slice(&v[r * cols..(r + 1) * cols]);
                }
            }
            Op::MobiusAdd { x, y, c, project } => {
                let cols = shape.cols;
                for ((orow, xr), yr) in out
                    .chunks_exact_mut(cols)
                    .zip(val(x).chunks_exact(cols))
                    .zip(val(y).chunks_exact(cols))
                {
                    let m = raw::mobius_add(*c, xr, yr);
                    orow.copy_from_slice(&m);
                    if *project {
                        raw::project(*c, orow);
                    }
                }
            }
            Op::MobiusScalar { x, r, c } => {
                let cols = shape.cols;
                for (orow, xr) in out.chunks_exact_mut(cols).zip(val(x).chunks_exact(cols)) {
                    orow.copy_from_slice(&raw::mobius_scalar_mul(*c, *r, xr));
                    raw::project(*c, orow);
                }
            }
            Op::Exp0 { x, c } => {
                let cols = shape.cols;
                for (orow, xr) in out.chunks_exact_mut(cols).zip(val(x).chunks_exact(cols)) {
                    orow.copy_from_slice(&raw::exp0(*c, xr));
                    raw::project(*c, orow);
                }
            }
            Op::Log0 { x, c } => {
                let cols = shape.cols;
                for (orow, xr) in out.chunks_exact_mut(cols).zip(val(x).chunks_exact(cols)) {
                    let v = raw::log0(*c, xr).map_err(|_| TapeError::Domain(i))?;
                    orow.copy_from_slice(&v);
                }
            }
            Op::Project { x, c } => {
                out.copy_from_slice(val(x));
                for orow in out.chunks_exact_mut(shape.cols) {
                    raw::project(*c, orow);
                }
            }
            Op::Softmax(a) => {
                for (orow, r) in out.chunks_exact_mut(shape.cols).zip(val(a).chunks_exact(shape.cols)) {
                    softmax_into(r, 1.0, orow);
                }
            }
            Op::CrossEntropy(z, labels) => {
                let k = nodes[z.0].shape.cols;
                for ((o, r), &y) in out.iter_mut().zip(val(z).chunks_exact(k)).zip(labels) {
                    *o = log_sum_exp(r) - r[y];
                }
            }
            Op::HypMlr { x, a, p, c } => {
                let l = nodes[x.0].shape.cols;
                let (xv, av, pv) = (val(x), val(a), val(p));
                let heads = MlrHeads::new(*c, av, pv, l);
                for (orow, xr) in out.chunks_exact_mut(shape.cols).zip(xv.chunks_exact(l)) {
                    let nx = norm_sq(xr);
                    for (k, o) in orow.iter_mut().enumerate() {
                        *o = heads.eval(k, xr, nx).logit;
                    }
                }
            }
            Op::Dist { x, y, c } => {
                let cols = nodes[x.0].shape.cols;
                for ((o, xr), yr) in out.iter_mut().zip(val(x).chunks_exact(cols)).zip(val(y).chunks_exact(cols)) {
                    *o = raw::dist_acosh(*c, xr, yr);
                }
            }
            Op::DistToOrigin { x, c } => {
                let cols = nodes[x.0].shape.cols;
                for (o, xr) in out.iter_mut().zip(val(x).chunks_exact(cols)) {
                    *o = raw::dist_to_origin(*c, xr);
                }
            }
            Op::LcaDepth { x, y, c } => {
                let cols = nodes[x.0].shape.cols;
                for ((o, xr), yr) in out.iter_mut().zip(val(x).chunks_exact(cols)).zip(val(y).chunks_exact(cols)) {
                    *o = lca_depth_closed_form(*c, xr, yr).0;
                }
            }
            Op::SegmentMinNorm(x, y) => {
                let cols = nodes[x.0].shape.cols;
                for ((o, xr), yr) in out.iter_mut().zip(val(x).chunks_exact(cols)).zip(val(y).chunks_exact(cols)) {
                    let t = segment_min_t(xr, yr);
                    *o = xr.iter().zip(yr).map(|(a, b)| (a + t * (b - a)).powi(2)).sum::<f64>().sqrt();
                }
            }
            Op::TripletLoss { d, l, triplets, tau, weights } => {
                let (dv, lv) = (val(d), val(l));
                let mut total = 0.0;
                for (t, tr) in triplets.iter().enumerate() {
                    let (w, s) = triplet_weights(dv, lv, tr, *tau, weights, t);
                    let wsum = w[0] + w[1] + w[2];
                    let wijk = w[0] * s[0] + w[1] * s[1] + w[2] * s[2];
                    total += (wsum - wijk) + 2.0 * wsum;
                }
                out[0] = total / triplets.len() as f64;
            }
        }
        Ok(())
    }

    pub fn backward(&mut self) -> Result<GradientMap, TapeError> {
        if !self.evaluated {
            return Err(TapeError::BackwardBeforeForward);
        }
        let out = self.output.ok_or(TapeError::NoOutput)?;
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
        self.grads[self.nodes[out.0].offset] = 1.0;
        for i in (0..=out.0).rev() {
            if self.nodes[i].requires_grad {
                self.backprop_node(i);
            }
        }
        let mut map = HashMap::new();
        for node in &self.nodes {
            if let Op::Input(name) = &node.op {
                let g = self.grads[node.offset..node.offset + node.shape.len()].to_vec();
                map.entry(name.clone())
                    .and_modify(|acc: &mut Vec<f64>| acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b))
                    .or_insert(g);
            }
        }
        Ok(GradientMap(map))
    }

    fn backprop_node(&mut self, i: usize) {
        let node = &self.nodes[i];
        let (off, shape) = (node.offset, node.shape);
        let (gbefore, grest) = self.grads.split_at_mut(off);
        let g = &grest[..shape.len()];
        if g.iter().all(|v| *v == 0.0) {
            return;
        }
        let nodes = &self.nodes;
        let values = &self.values;
        let out = &values[off..off + shape.len()];
        let val = |n: &NodeId| -> &[f64] {
            let m = &nodes[n.0];
            &values[m.offset..m.offset + m.shape.len()]
        };
        // Accumulate into an input's gradient slot unless it does not need one.
        macro_rules! acc {
            ($n:expr) => {{
                let m = &nodes[$n.0];
                if m.requires_grad {
                    Some(&mut gbefore[m.offset..m.offset + m.shape.len()])
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Input(_) | Op::Constant => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = acc!(a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Linear(x, w) => {
                let d = nodes[x.0].shape.cols;
                let l = shape.cols;
                let (xv, wv) = (val(x), val(w));
                if let Some(gx) = acc!(x) {
                    for (gxr, gr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(l)) {
                        for (gj, wr) in gr.iter().zip(wv.chunks_exact(d)) {
                            if *gj != 0.0 {
                                axpy(gxr, *gj, wr);
                            }
                        }
                    }
                }
                if let Some(gw) = acc!(w) {
                    for (xr, gr) in xv.chunks_exact(d).zip(g.chunks_exact(l)) {
                        for (gj, gwr) in gr.iter().zip(gw.chunks_exact_mut(d)) {
                            if *gj != 0.0 {
                                axpy(gwr, *gj, xr);
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = acc!(b) {
                    for gr in g.chunks_exact(shape.cols) {
                        gb.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Relu(a) => {
                let av = val(a);
                if let Some(ga) = acc!(a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => elementwise_grad(acc!(a), g, val(a), out, |_, y| 1.0 - y * y),
            Op::Atanh(a) => elementwise_grad(acc!(a), g, val(a), out, |x, _| 1.0 / (1.0 - x * x)),
            Op::Asinh(a) => elementwise_grad(acc!(a), g, val(a), out, |x, _| 1.0 / (1.0 + x * x).sqrt()),
            Op::Arccosh(a) => elementwise_grad(acc!(a), g, val(a), out, |x, _| 1.0 / (x * x - 1.0).sqrt()),
            Op::Exp(a) => elementwise_grad(acc!(a), g, val(a), out, |_, y| y),
            Op::Log(a) => elementwise_grad(acc!(a), g, val(a), out, |x, _| 1.0 / x),
            Op::Sum(a) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = acc!(a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::RowSqNorm(a) => {
                let cols = nodes[a.0].shape.cols;
                let av = val(a);
                if let Some(ga) = acc!(a) {
                    for ((gr, ar), gi) in ga.chunks_exact_mut(cols).zip(av.chunks_exact(cols)).zip(g) {
                        axpy(gr, 2.0 * gi, ar);
                    }
                }
            }
            Op::RowNorm(a) => {
                let cols = nodes[a.0].shape.cols;
                let av = val(a);
                if let Some(ga) = acc!(a) {
                    for (((gr, ar), gi), n) in ga.chunks_exact_mut(cols).zip(av.chunks_exact(cols)).zip(g).zip(out) {
                        if *n > 0.0 {
                            axpy(gr, gi / n, ar);
                        }
                    }
                }
            }
            Op::Gather(a, rows) => {
                let cols = shape.cols;
                if let Some(ga) = acc!(a) {
                    for (gr, &r) in g.chunks_exact(cols).zip(rows) {
                        ga[r * cols..(r + 1) * cols].iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MobiusAdd { x, y, c, project } => {
                let cols = shape.cols;
                let (xv, yv) = (val(x), val(y));
                let mut gxs = vec![0.0; xv.len()];
                let mut gys = vec![0.0; yv.len()];
                for r in 0..shape.rows {
                    let sl = r * cols..(r + 1) * cols;
                    let (xr, yr) = (&xv[sl.clone()], &yv[sl.clone()]);
                    let mut gr = g[sl.clone()].to_vec();
                    if *project {
                        let m = raw::mobius_add(*c, xr, yr);
                        project_vjp(*c, &m, &mut gr);
                    }
                    mobius_add_vjp(*c, xr, yr, &gr, &mut gxs[sl.clone()], &mut gys[sl]);
                }
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(&gxs).for_each(|(p, q)| *p += q);
                }
                if let Some(gy) = acc!(y) {
                    gy.iter_mut().zip(&gys).for_each(|(p, q)| *p += q);
                }
            }
            Op::MobiusScalar { x, r, c } => {
                let cols = shape.cols;
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((gxr, xr), gr) in gx.chunks_exact_mut(cols).zip(xv.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        let m = raw::mobius_scalar_mul(*c, *r, xr);
                        let mut gm = gr.to_vec();
                        project_vjp(*c, &m, &mut gm);
                        radial_vjp(xr, &gm, gxr, |n| scalar_mul_profile(*c, *r, n));
                    }
                }
            }
            Op::Exp0 { x, c } => {
                let cols = shape.cols;
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((gxr, xr), gr) in gx.chunks_exact_mut(cols).zip(xv.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        let m = raw::exp0(*c, xr);
                        let mut gm = gr.to_vec();
                        project_vjp(*c, &m, &mut gm);
                        radial_vjp(xr, &gm, gxr, |n| exp0_profile(*c, n));
                    }
                }
            }
            Op::Log0 { x, c } => {
                let cols = shape.cols;
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((gxr, xr), gr) in gx.chunks_exact_mut(cols).zip(xv.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        radial_vjp(xr, gr, gxr, |n| log0_profile(*c, n));
                    }
                }
            }
            Op::Project { x, c } => {
                let cols = shape.cols;
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((gxr, xr), gr) in gx.chunks_exact_mut(cols).zip(xv.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        let mut gm = gr.to_vec();
                        project_vjp(*c, xr, &mut gm);
                        gxr.iter_mut().zip(&gm).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = shape.cols;
                if let Some(ga) = acc!(a) {
                    for ((gar, sr), gr) in ga.chunks_exact_mut(cols).zip(out.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        let gs = dot(gr, sr);
                        for ((p, s), q) in gar.iter_mut().zip(sr).zip(gr) {
                            *p += s * (q - gs);
                        }
                    }
                }
            }
            Op::CrossEntropy(z, labels) => {
                let k = nodes[z.0].shape.cols;
                let zv = val(z);
                if let Some(gz) = acc!(z) {
                    let mut probs = vec![0.0; k];
                    for (((gzr, zr), gi), &y) in gz.chunks_exact_mut(k).zip(zv.chunks_exact(k)).zip(g).zip(labels) {
                        softmax_into(zr, 1.0, &mut probs);
                        for (j, (p, q)) in gzr.iter_mut().zip(&probs).enumerate() {
                            let t = if j == y { 1.0 } else { 0.0 };
                            *p += gi * (q - t);
                        }
                    }
                }
            }
            Op::HypMlr { x, a, p, c } => {
                let l = nodes[x.0].shape.cols;
                let k_classes = shape.cols;
                let (xv, av, pv) = (val(x), val(a), val(p));
                let heads = MlrHeads::new(*c, av, pv, l);
                let mut gx = vec![0.0; xv.len()];
                let mut ga = vec![0.0; av.len()];
                let mut gp = vec![0.0; pv.len()];
                for (row, (xr, gr)) in xv.chunks_exact(l).zip(g.chunks_exact(k_classes)).enumerate() {
                    let nx = norm_sq(xr);
                    let gxr = &mut gx[row * l..(row + 1) * l];
                    for (k, gk) in gr.iter().enumerate() {
                        if *gk == 0.0 {
                            continue;
                        }
                        let e = heads.eval(k, xr, nx);
                        if e.degenerate {
                            continue;
                        }
                        let (u, ak) = (heads.u(k), heads.a(k));
                        let pr = e.partials(*c, &heads, k);
                        // d/dx: P_s·u + 2P_nx·x + P_xa·a
                        for j in 0..l {
                            gxr[j] += gk * (pr.s * u[j] + 2.0 * pr.nx * xr[j] + pr.xa * ak[j]);
                        }
                        let gpk = &mut gp[k * l..(k + 1) * l];
                        // u = -p
                        for j in 0..l {
                            gpk[j] -= gk * (pr.s * xr[j] + 2.0 * pr.nu * u[j] + pr.ua * ak[j]);
                        }
                        let gak = &mut ga[k * l..(k + 1) * l];
                        for j in 0..l {
                            gak[j] += gk * (pr.ua * u[j] + pr.xa * xr[j] + 2.0 * pr.na2 * ak[j]);
                        }
                    }
                }
                if let Some(t) = acc!(x) {
                    t.iter_mut().zip(&gx).for_each(|(p, q)| *p += q);
                }
                if let Some(t) = acc!(a) {
                    t.iter_mut().zip(&ga).for_each(|(p, q)| *p += q);
                }
                if let Some(t) = acc!(p) {
                    t.iter_mut().zip(&gp).for_each(|(p, q)| *p += q);
                }
            }
            Op::Dist { x, y, c } => {
                let cols = nodes[x.0].shape.cols;
                let (xv, yv) = (val(x), val(y));
                let mut gxs = vec![0.0; xv.len()];
                let mut gys = vec![0.0; yv.len()];
                for r in 0..shape.rows {
                    let sl = r * cols..(r + 1) * cols;
                    dist_vjp(*c, &xv[sl.clone()], &yv[sl.clone()], g[r], &mut gxs[sl.clone()], &mut gys[sl]);
                }
                if let Some(t) = acc!(x) {
                    t.iter_mut().zip(&gxs).for_each(|(p, q)| *p += q);
                }
                if let Some(t) = acc!(y) {
                    t.iter_mut().zip(&gys).for_each(|(p, q)| *p += q);
                }
            }
            Op::DistToOrigin { x, c } => {
                let cols = nodes[x.0].shape.cols;
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((gxr, xr), gi) in gx.chunks_exact_mut(cols).zip(xv.chunks_exact(cols)).zip(g) {
                        dist_to_origin_vjp(*c, xr, *gi, gxr);
                    }
                }
            }
            Op::LcaDepth { x, y, c } => {
                let cols = nodes[x.0].shape.cols;
                let (xv, yv) = (val(x), val(y));
                let mut gxs = vec![0.0; xv.len()];
                let mut gys = vec![0.0; yv.len()];
                for r in 0..shape.rows {
                    let sl = r * cols..(r + 1) * cols;
                    lca_depth_vjp(*c, &xv[sl.clone()], &yv[sl.clone()], g[r], &mut gxs[sl.clone()], &mut gys[sl]);
                }
                if let Some(t) = acc!(x) {
                    t.iter_mut().zip(&gxs).for_each(|(p, q)| *p += q);
                }
                if let Some(t) = acc!(y) {
                    t.iter_mut().zip(&gys).for_each(|(p, q)| *p += q);
                }
            }
            Op::SegmentMinNorm(x, y) => {
                let cols = nodes[x.0].shape.cols;
                let (xv, yv) = (val(x), val(y));
                let mut gxs = vec![0.0; xv.len()];
                let mut gys = vec![0.0; yv.len()];
                for r in 0..shape.rows {
                    let sl = r * cols..(r + 1) * cols;
                    let (xr, yr) = (&xv[sl.clone()], &yv[sl.clone()]);
                    let t = segment_min_t(xr, yr);
                    let n = out[r];
                    if n == 0.0 {
                        continue;
                    }
                    for j in 0..cols {
                        let pj = xr[j] + t * (yr[j] - xr[j]);
                        gxs[r * cols + j] += g[r] * (1.0 - t) * pj / n;
                        gys[r * cols + j] += g[r] * t * pj / n;
                    }
                }
                if let Some(t) = acc!(x) {
                    t.iter_mut().zip(&gxs).for_each(|(p, q)| *p += q);
                }
                if let Some(t) = acc!(y) {
                    t.iter_mut().zip(&gys).for_each(|(p, q)| *p += q);
                }
            }
            Op::TripletLoss { d, l, triplets, tau, weights } => {
                let (dv, lv) = (val(d), val(l));
                let scale = g[0] / triplets.len() as f64;
                let mut gd = vec![0.0; dv.len()];
                let mut gl = vec![0.0; lv.len()];
                for (t, tr) in triplets.iter().enumerate() {
                    let (w, s) = triplet_weights(dv, lv, tr, *tau, weights, t);
                    // loss_t = 3·Σw - w·s
                    let gw = [3.0 - s[0], 3.0 - s[1], 3.0 - s[2]];
                    let gs = [-w[0], -w[1], -w[2]];
                    let gs_dot = gs[0] * s[0] + gs[1] * s[1] + gs[2] * s[2];
                    for m in 0..3 {
                        gl[tr[m]] += scale * s[m] * (gs[m] - gs_dot) / tau;
                    }
                    if let TripletWeights::Softmax(sign) = weights {
                        let sgn = match sign {
                            SimilaritySign::Negative => -1.0,
                            SimilaritySign::Literal => 1.0,
                        };
                        let gw_dot = gw[0] * w[0] + gw[1] * w[1] + gw[2] * w[2];
                        for m in 0..3 {
                            gd[tr[m]] += scale * sgn * w[m] * (gw[m] - gw_dot) / tau;
                        }
                    }
                }
                if let Some(t) = acc!(d) {
                    t.iter_mut().zip(&gd).for_each(|(p, q)| *p += q);
                }
                if let Some(t) = acc!(l) {
                    t.iter_mut().zip(&gl).for_each(|(p, q)| *p += q);
                }
            }
        }
    }
}

#[inline]
fn zip2(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = f(*x, *y);
    }
}

#[inline]
fn map1(out: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64) {
    for (o, x) in out.iter_mut().zip(a) {
        *o = f(*x);
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn elementwise_grad(ga: Option<&mut [f64]>, g: &[f64], x: &[f64], y: &[f64], d: impl Fn(f64, f64) -> f64) {
    if let Some(ga) = ga {
        for (((p, gi), xi), yi) in ga.iter_mut().zip(g).zip(x).zip(y) {
            *p += gi * d(*xi, *yi);
        }
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `softmax(z/τ)` written into `out`, max-subtracted.
pub(crate) fn softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = ((v - m) / tau).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn triplet_weights(
    d: &[f64],
    l: &[f64],
    tr: &[usize; 3],
    tau: f64,
    weights: &TripletWeights,
    t: usize,
) -> ([f64; 3], [f64; 3]) {
    let mut w = [0.0; 3];
    match weights {
        TripletWeights::Softmax(sign) => {
            let sgn = match sign {
                SimilaritySign::Negative => -1.0,
                SimilaritySign::Literal => 1.0,
            };
            let z = [sgn * d[tr[0]], sgn * d[tr[1]], sgn * d[tr[2]]];
            softmax_into(&z, tau, &mut w);
        }
        TripletWeights::Fixed(ws) => w = ws[t],
    }
    let mut s = [0.0; 3];
    softmax_into(&[l[tr[0]], l[tr[1]], l[tr[2]]], tau, &mut s);
    (w, s)
}

/// Back-propagates through the clip onto the safe ball, given the unclipped point `m`.
fn project_vjp(c: f64, m: &[f64], g: &mut [f64]) {
    let max = (1.0 - crate::ball::EPS_BALL) / c.sqrt();
    let n = norm(m);
    if n > max {
        let gm = dot(m, g) / (n * n);
        for (gi, mi) in g.iter_mut().zip(m) {
            *gi = max / n * (*gi - mi * gm);
        }
    }
}

/// VJP of a radial map `x ↦ h(‖x‖)·x`; `profile(n)` returns `(h(n), h'(n))`.
fn radial_vjp(x: &[f64], g: &[f64], gx: &mut [f64], profile: impl Fn(f64) -> (f64, f64)) {
    let n = norm(x);
    let (h, dh) = profile(n);
    let coef = if n > 0.0 { dh * dot(x, g) / n } else { 0.0 };
    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(x) {
        *o += h * gi + coef * xi;
    }
}

fn exp0_profile(c: f64, n: f64) -> (f64, f64) {
    let k = c.sqrt();
    let kn = k * n;
    if kn < 1e-4 {
        (1.0 - kn * kn / 3.0, -2.0 / 3.0 * k * kn)
    } else {
        let t = kn.tanh();
        let sech2 = 1.0 - t * t;
        (t / kn, (sech2 * kn - t) / (k * n * n))
    }
}

fn log0_profile(c: f64, n: f64) -> (f64, f64) {
    let k = c.sqrt();
    let kn = k * n;
    if kn < 1e-4 {
        (1.0 + kn * kn / 3.0, 2.0 / 3.0 * k * kn)
    } else {
        let at = kn.atanh();
        (at / kn, (kn / (1.0 - kn * kn) - at) / (k * n * n))
    }
}

fn scalar_mul_profile(c: f64, r: f64, n: f64) -> (f64, f64) {
    let k = c.sqrt();
    let kn = k * n;
    if kn < 1e-4 {
        (r + r * (1.0 - r * r) * kn * kn / 3.0, 2.0 / 3.0 * (r - r * r * r) * k * kn)
    } else {
        let kn = kn.min(1.0 - 1e-16);
        let t = (r * kn.atanh()).tanh();
        let dt = (1.0 - t * t) * r * k / (1.0 - kn * kn);
        (t / kn, (dt * n - t) / (k * n * n))
    }
}

/// VJP of the unclipped Möbius sum `x ⊕_c y`, accumulated into `gx` and `gy`.
pub(crate) fn mobius_add_vjp(c: f64, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    let s = dot(x, y);
    let nx = norm_sq(x);
    let ny = norm_sq(y);
    let a = 1.0 + 2.0 * c * s + c * ny;
    let b = 1.0 - c * nx;
    let den = 1.0 + 2.0 * c * s + c * c * nx * ny;
    let gxd = dot(g, x);
    let gyd = dot(g, y);
    // ⟨g, numerator⟩ = a⟨g,x⟩ + b⟨g,y⟩
    let gn = a * gxd + b * gyd;
    let q = gn / (den * den);
    for j in 0..x.len() {
        // numerator = a·x + b·y with a = 1 + 2c⟨x,y⟩ + c‖y‖², b = 1 - c‖x‖²
        let dx = (a * g[j] + gxd * 2.0 * c * y[j] - gyd * 2.0 * c * x[j]) / den
            - q * (2.0 * c * y[j] + 2.0 * c * c * ny * x[j]);
        let dy = (b * g[j] + gxd * (2.0 * c * x[j] + 2.0 * c * y[j])) / den
            - q * (2.0 * c * x[j] + 2.0 * c * c * nx * y[j]);
        gx[j] += dx;
        gy[j] += dy;
    }
}

fn dist_vjp(c: f64, x: &[f64], y: &[f64], g: f64, gx: &mut [f64], gy: &mut [f64]) {
    let alpha = 1.0 - c * norm_sq(x);
    let beta = 1.0 - c * norm_sq(y);
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let e = 2.0 * c * diff / (alpha * beta);
    if e <= 0.0 {
        return;
    }
    let dd_de = g / (c.sqrt() * (e * (e + 2.0)).sqrt());
    for j in 0..x.len() {
        let dxy = x[j] - y[j];
        let de_dx = 4.0 * c * dxy / (alpha * beta) + 4.0 * c * c * diff * x[j] / (alpha * alpha * beta);
        let de_dy = -4.0 * c * dxy / (alpha * beta) + 4.0 * c * c * diff * y[j] / (alpha * beta * beta);
        gx[j] += dd_de * de_dx;
        gy[j] += dd_de * de_dy;
    }
}

fn dist_to_origin_vjp(c: f64, x: &[f64], g: f64, gx: &mut [f64]) {
    let n2 = norm_sq(x);
    let n = n2.sqrt();
    if n == 0.0 {
        return;
    }
    let coef = g * 2.0 / (n * (1.0 - c * n2));
    axpy(gx, coef, x);
}

/// Which branch of the geodesic-segment minimisation is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcaBranch {
    /// The closest point to the origin lies strictly inside the segment.
    Interior,
    /// The segment's closest point is the endpoint `x`.
    First,
    /// The segment's closest point is the endpoint `y`.
    Second,
}

struct LcaTerms {
    alpha: f64,
    beta: f64,
    diff: f64,
    a: f64,
    b: f64,
    e: f64,
}

fn lca_terms(c: f64, x: &[f64], y: &[f64]) -> LcaTerms {
    // Unit-curvature coordinates u = √c·x, v = √c·y.
    let alpha = 1.0 - c * norm_sq(x);
    let beta = 1.0 - c * norm_sq(y);
    let diff = c * x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    LcaTerms {
        alpha,
        beta,
        diff,
        a: 2.0 / alpha - 1.0,
        b: 2.0 / beta - 1.0,
        e: 2.0 * diff / (alpha * beta),
    }
}

/// Hyperbolic distance from the origin to the geodesic segment `[x, y]`.
///
/// With `a = cosh d(0,x)`, `b = cosh d(0,y)` and `C = cosh d(x,y)`, the foot of
/// the perpendicular from the origin lies inside the segment iff `C·b ≥ a` and
/// `C·a ≥ b`, and then `cosh² δ = (2Cab - a² - b²)/(C² - 1)`. Otherwise the
/// nearer endpoint wins.
pub fn lca_depth_closed_form(c: f64, x: &[f64], y: &[f64]) -> (f64, LcaBranch) {
    let t = lca_terms(c, x, y);
    let (a, b, e) = (t.a, t.b, t.e);
    let sc = c.sqrt();
    let endpoint = || {
        if a <= b {
            (raw::dist_to_origin(c, x), LcaBranch::First)
        } else {
            (raw::dist_to_origin(c, y), LcaBranch::Second)
        }
    };
    if e < 1e-14 {
        return endpoint();
    }
    if (1.0 + e) * b < a || (1.0 + e) * a < b {
        return endpoint();
    }
    let q = (2.0 * a * b * e - (a - b) * (a - b)) / (e * (e + 2.0));
    let q = q.max(1.0);
    // acosh(√q) = ½·acosh(2q - 1)
    (0.5 * acosh1p(2.0 * (q - 1.0)) / sc, LcaBranch::Interior)
}

fn lca_depth_vjp(c: f64, x: &[f64], y: &[f64], g: f64, gx: &mut [f64], gy: &mut [f64]) {
    let (_, branch) = lca_depth_closed_form(c, x, y);
    match branch {
        LcaBranch::First => dist_to_origin_vjp(c, x, g, gx),
        LcaBranch::Second => dist_to_origin_vjp(c, y, g, gy),
        LcaBranch::Interior => {
            let t = lca_terms(c, x, y);
            let (a, b, e) = (t.a, t.b, t.e);
            let num = 2.0 * a * b * e - (a - b) * (a - b);
            let den = e * (e + 2.0);
            let q = num / den;
            if q <= 1.0 + 1e-15 {
                return;
            }
            // δ_unit = acosh(√q); depth = δ_unit/√c and d/dx = √c·d/du, so the √c cancels.
            let dd_dq = g / (2.0 * (q * (q - 1.0)).sqrt());
            let dq_da = (2.0 * b * e - 2.0 * (a - b)) / den;
            let dq_db = (2.0 * a * e + 2.0 * (a - b)) / den;
            let dq_de = (2.0 * a * b * den - num * (2.0 * e + 2.0)) / (den * den);
            let sc = c.sqrt();
            let (al, be, diff) = (t.alpha, t.beta, t.diff);
            for j in 0..x.len() {
                let (u, v) = (sc * x[j], sc * y[j]);
                let da_du = 4.0 * u / (al * al);
                let db_dv = 4.0 * v / (be * be);
                let de_du = 4.0 * (u - v) / (al * be) + 4.0 * diff * u / (al * al * be);
                let de_dv = -4.0 * (u - v) / (al * be) + 4.0 * diff * v / (al * be * be);
                gx[j] += dd_dq * (dq_da * da_du + dq_de * de_du);
                gy[j] += dd_dq * (dq_db * db_dv + dq_de * de_dv);
            }
        }
    }
}

/// Parameter `t ∈ [0, 1]` of the point of `x + t(y - x)` closest to the origin.
pub fn segment_min_t(x: &[f64], y: &[f64]) -> f64 {
    let mut dd = 0.0;
    let mut xd = 0.0;
    for (a, b) in x.iter().zip(y) {
        dd += (b - a) * (b - a);
        xd += a * (b - a);
    }
    if dd < 1e-300 {
        0.0
    } else {
        (-xd / dd).clamp(0.0, 1.0)
    }
}

/// Per-class quantities of the hyperbolic MLR head shared across a batch.
struct MlrHeads<'a> {
    c: f64,
    l: usize,
    a: &'a [f64],
    u: Vec<f64>,
    nu: Vec<f64>,
    ua: Vec<f64>,
    na2: Vec<f64>,
}

struct MlrEval {
    logit: f64,
    degenerate: bool,
    s: f64,
    nx: f64,
    xa: f64,
    acoef: f64,
    bcoef: f64,
    den: f64,
    e: f64,
    zz: f64,
    q: f64,
    q_clamped: bool,
    arg: f64,
    lam: f64,
    na: f64,
}

struct MlrPartials {
    s: f64,
    nu: f64,
    nx: f64,
    ua: f64,
    xa: f64,
    na2: f64,
}

impl<'a> MlrHeads<'a> {
    fn new(c: f64, a: &'a [f64], p: &[f64], l: usize) -> Self {
        let u: Vec<f64> = p.iter().map(|v| -v).collect();
        let k = a.len() / l;
        let mut nu = Vec::with_capacity(k);
        let mut ua = Vec::with_capacity(k);
        let mut na2 = Vec::with_capacity(k);
        for i in 0..k {
            let ur = &u[i * l..(i + 1) * l];
            let ar = &a[i * l..(i + 1) * l];
            nu.push(norm_sq(ur));
            ua.push(dot(ur, ar));
            na2.push(norm_sq(ar));
        }
        Self { c, l, a, u, nu, ua, na2 }
    }

    fn u(&self, k: usize) -> &[f64] {
        &self.u[k * self.l..(k + 1) * self.l]
    }

    fn a(&self, k: usize) -> &[f64] {
        &self.a[k * self.l..(k + 1) * self.l]
    }

    fn eval(&self, k: usize, x: &[f64], nx: f64) -> MlrEval {
        let c = self.c;
        let (nu, ua, na2) = (self.nu[k], self.ua[k], self.na2[k]);
        let na = na2.sqrt();
        let s = dot(self.u(k), x);
        let xa = dot(x, self.a(k));
        let acoef = 1.0 + 2.0 * c * s + c * nx;
        let bcoef = 1.0 - c * nu;
        let den = 1.0 + 2.0 * c * s + c * c * nu * nx;
        let e = (acoef * ua + bcoef * xa) / den;
        let zz = (acoef * acoef * nu + 2.0 * acoef * bcoef * s + bcoef * bcoef * nx) / (den * den);
        let q_raw = 1.0 - c * zz;
        let q_clamped = q_raw < 1e-15;
        let q = q_raw.max(1e-15);
        let lam = 2.0 / (1.0 - c * nu);
        let sc = c.sqrt();
        if na < 1e-12 {
            return MlrEval {
                logit: 0.0,
                degenerate: true,
                s,
                nx,
                xa,
                acoef,
                bcoef,
                den,
                e,
                zz,
                q,
                q_clamped,
                arg: 0.0,
                lam,
                na,
            };
        }
        let arg = 2.0 * sc * e / (q * na);
        let logit = lam * na / sc * arg.asinh();
        MlrEval { logit, degenerate: false, s, nx, xa, acoef, bcoef, den, e, zz, q, q_clamped, arg, lam, na }
    }
}

impl MlrEval {
    /// Partials of the logit with respect to the scalar invariants
    /// `s=⟨u,x⟩, nu=‖u‖², nx=‖x‖², ua=⟨u,a⟩, xa=⟨x,a⟩, na2=‖a‖²`.
    fn partials(&self, c: f64, heads: &MlrHeads<'_>, k: usize) -> MlrPartials {
        let sc = c.sqrt();
        let (nu, ua) = (heads.nu[k], heads.ua[k]);
        let (s, nx, acoef, bcoef, den, e, zz, q) =
            (self.s, self.nx, self.acoef, self.bcoef, self.den, self.e, self.zz, self.q);
        let asinh_arg = self.arg.asinh();
        let big_g = self.lam * self.na / sc / (1.0 + self.arg * self.arg).sqrt();
        let de_coef = big_g * 2.0 * sc / (q * self.na);
        let dzz_coef = if self.q_clamped { 0.0 } else { big_g * self.arg * c / q };

        // e = (A·ua + B·xa)/D
        let de_ds = (2.0 * c * ua) / den - e * 2.0 * c / den;
        let de_dnu = (-c * self.xa) / den - e * c * c * nx / den;
        let de_dnx = (c * ua) / den - e * c * c * nu / den;
        let de_dua = acoef / den;
        let de_dxa = bcoef / den;

        // zz = Nz/D²
        let d2 = den * den;
        let dnz_ds = 4.0 * c * acoef * nu + 4.0 * c * bcoef * s + 2.0 * acoef * bcoef;
        let dnz_dnu = acoef * acoef - 2.0 * c * acoef * s - 2.0 * c * bcoef * nx;
        let dnz_dnx = 2.0 * acoef * c * nu + 2.0 * c * bcoef * s + bcoef * bcoef;
        let dzz_ds = dnz_ds / d2 - 2.0 * zz / den * (2.0 * c);
        let dzz_dnu = dnz_dnu / d2 - 2.0 * zz / den * (c * c * nx);
        let dzz_dnx = dnz_dnx / d2 - 2.0 * zz / den * (c * c * nu);

        let dlam_dnu = c * self.lam * self.lam / 2.0;
        MlrPartials {
            s: de_coef * de_ds + dzz_coef * dzz_ds,
            nu: de_coef * de_dnu + dzz_coef * dzz_dnu + asinh_arg / sc * self.na * dlam_dnu,
            nx: de_coef * de_dnx + dzz_coef * dzz_dnx,
            ua: de_coef * de_dua,
            xa: de_coef * de_dxa,
            na2: (asinh_arg / sc * self.lam - big_g * self.arg / self.na) / (2.0 * self.na),
        }
    }
}

/// Central-difference check of the analytic gradient of `graph` with respect
/// to the named inputs. Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradient(
    graph: &mut Graph,
    bindings: &Bindings,
    params: &[&str],
    h: f64,
) -> Result<f64, TapeError> {
    assert!(h > 0.0, "step must be positive");
    graph.forward(bindings)?;
    let analytic = graph.backward()?;
    let mut work = bindings.clone();
    let mut worst: f64 = 0.0;
    for name in params {
        let len = bindings.get(name).ok_or_else(|| TapeError::UnboundInput(name.to_string()))?.len();
        let grad = analytic.get(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for j in 0..len {
            let orig = work.get(name).expect("bound")[j];
            work.get_mut(name).expect("bound")[j] = orig + h;
            let up = graph.forward(&work)?;
            work.get_mut(name).expect("bound")[j] = orig - h;
            let down = graph.forward(&work)?;
            work.get_mut(name).expect("bound")[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grad[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    // Leave the graph evaluated at the original point.
    graph.forward(bindings)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_value_and_gradient() {
        let mut g = Graph::new();
        let v = g.input("v", 1, 2);
        let n = g.row_sq_norm(v);
        let s = g.sum(n);
        g.set_output(s);
        let b = Bindings::new().with("v", vec![3.0, 4.0]);
        assert_eq!(g.forward(&b).unwrap(), 25.0);
        let grads = g.backward().unwrap();
        assert_eq!(grads.get("v").unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let mut g = Graph::new();
        let z = g.input("z", 1, 4);
        let ce = g.cross_entropy(z, vec![2]);
        let m = g.mean(ce);
        g.set_output(m);
        let v = g.forward(&Bindings::new().with("z", vec![0.7; 4])).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dist_to_origin_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 2);
        let d = g.dist_to_origin(x, 1.0);
        let s = g.sum(d);
        g.set_output(s);
        let v = g.forward(&Bindings::new().with("x", vec![0.6, 0.0])).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        g.forward(&Bindings::new().with("x", vec![0.5, 0.0])).unwrap();
        let gr = g.backward().unwrap();
        let gx = gr.get("x").unwrap();
        assert!((gx[0] - 2.0 / 0.75).abs() < 1e-12);
        assert_eq!(gx[1], 0.0);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let t = g.tanh(x);
        let s = g.sum(t);
        g.set_output(s);
        g.forward(&Bindings::new().with("x", vec![0.0])).unwrap();
        assert_eq!(g.backward().unwrap().get("x").unwrap(), &[1.0]);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 3);
        assert_eq!(g.forward(&Bindings::new()), Err(TapeError::NoOutput));
        g.set_output(x);
        assert_eq!(g.forward(&Bindings::new()), Err(TapeError::NonScalarOutput(1, 3)));
        let s = g.sum(x);
        g.set_output(s);
        assert_eq!(g.backward(), Err(TapeError::BackwardBeforeForward));
        assert_eq!(g.forward(&Bindings::new()), Err(TapeError::UnboundInput("x".into())));
        assert!(matches!(
            g.forward(&Bindings::new().with("x", vec![1.0])),
            Err(TapeError::BindingShape { .. })
        ));
    }

    #[test]
    fn log0_outside_ball_is_domain_error() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 2);
        let l = g.log0(x, 1.0);
        let s = g.sum(l);
        g.set_output(s);
        assert!(matches!(g.forward(&Bindings::new().with("x", vec![1.5, 0.0])), Err(TapeError::Domain(_))));
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 3);
        let z = g.scale(x, 0.0);
        let c = g.constant(1, 3, &[1.0, 2.0, 3.0]);
        let y = g.add(z, c);
        let s = g.sum(y);
        g.set_output(s);
        let b = Bindings::new().with("x", vec![0.3, -0.1, 0.2]);
        let err = check_gradient(&mut g, &b, &["x"], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(g.backward().unwrap().get("x").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lca_closed_form_degenerate_cases() {
        let x = [0.3, 0.2];
        let (d, _) = lca_depth_closed_form(1.0, &x, &x);
        assert!((d - raw::dist_to_origin(1.0, &x)).abs() < 1e-12);
        let (d, br) = lca_depth_closed_form(1.0, &[0.4, 0.1], &[-0.4, -0.1]);
        assert!(d.abs() < 1e-7, "antipodal depth {d}");
        assert_eq!(br, LcaBranch::Interior);
    }
}
