//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node holds the primitive
//! that produced it, the ids of its inputs (which always precede it) and its
//! forward value. [`Graph::backward`] walks the list in reverse from a scalar
//! root and returns the gradient of the root with respect to every parameter
//! leaf.
//!
//! Broadcasting is deliberately narrow: binary elementwise primitives accept
//! either equal shapes or a rank-0 scalar on one side, and the only other
//! broadcast is the pairwise outer difference.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::Tensor;

/// Lower bound applied to the radicand when differentiating the square root.
pub const SQRT_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{primitive}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        primitive: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{primitive}: input value {value} at index {index} is outside the domain")]
    Domain {
        primitive: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{primitive}: {reason}")]
    InvalidArgument {
        primitive: &'static str,
        reason: &'static str,
    },
    #[error("backward root must hold a single value, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("gradient check is not applicable to functions containing detach")]
    DetachInGradCheck,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of operations a graph can record.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// Trainable leaf.
    Parameter,
    /// Leaf that never receives a gradient.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
    Softplus,
    Relu,
    /// Reads the input as rows of `lanes` interleaved values and returns the
    /// `[n, n]` matrix of `x[i] - x[j]` taken from lane `lane`.
    OuterDiff {
        lanes: usize,
        lane: usize,
    },
    /// Same as [`Primitive::OuterDiff`] restricted to an explicit pair list;
    /// the output is a vector with one difference per pair.
    PairDiff {
        lanes: usize,
        lane: usize,
        pairs: Arc<[(u32, u32)]>,
    },
    /// `sum(weights[i] * x[i])` over entries where `mask[i]` holds.
    MaskedWeightedSum {
        mask: Arc<[bool]>,
        weights: Arc<[f64]>,
    },
    Sum,
    Mean,
    Scale(f64),
    Clamp {
        min: f64,
        max: f64,
    },
    /// Identity on values, blocks every gradient.
    Detach,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Parameter => "parameter",
            Primitive::Constant => "constant",
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::Div => "divide",
            Primitive::MatMul => "matmul",
            Primitive::Exp => "exp",
            Primitive::Ln => "ln",
            Primitive::Sqrt => "sqrt",
            Primitive::Abs => "abs",
            Primitive::Square => "square",
            Primitive::Softplus => "softplus",
            Primitive::Relu => "relu",
            Primitive::OuterDiff { .. } => "outer-difference",
            Primitive::PairDiff { .. } => "pair-difference",
            Primitive::MaskedWeightedSum { .. } => "masked-weighted-sum",
            Primitive::Sum => "reduce-sum",
            Primitive::Mean => "reduce-mean",
            Primitive::Scale(_) => "scale",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Detach => "detach",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Parameter | Primitive::Constant => 0,
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    primitive: Primitive,
    inputs: [usize; 2],
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_node.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn is_rank0(t: &Tensor) -> bool {
    t.shape().is_empty()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn primitive(&self, id: NodeId) -> &Primitive {
        &self.nodes[id.0].primitive
    }

    /// True if any recorded node is a detach.
    pub fn contains_detach(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.primitive, Primitive::Detach))
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Parameter, [0, 0], value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Constant, [0, 0], value, false)
    }

    fn push(&mut self, primitive: Primitive, inputs: [usize; 2], value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            primitive,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<usize, GraphError> {
        if id.0 < self.nodes.len() {
            Ok(id.0)
        } else {
            Err(GraphError::UnknownNode(id.0))
        }
    }

    /// Records `primitive` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        let name = primitive.name();
        if inputs.len() != primitive.arity() {
            return Err(GraphError::InvalidArgument {
                primitive: name,
                reason: "wrong number of inputs",
            });
        }
        let mut idx = [0usize; 2];
        for (slot, id) in idx.iter_mut().zip(inputs) {
            *slot = self.check(*id)?;
        }
        let value = match &primitive {
            Primitive::Parameter | Primitive::Constant => unreachable!("leaves have no inputs"),
            Primitive::Add => self.binary(name, idx, |a, b| a + b)?,
            Primitive::Sub => self.binary(name, idx, |a, b| a - b)?,
            Primitive::Mul => self.binary(name, idx, |a, b| a * b)?,
            Primitive::Div => self.binary(name, idx, |a, b| a / b)?,
            Primitive::MatMul => self.matmul_value(idx)?,
            Primitive::Exp => self.unary(idx[0], libm::exp),
            Primitive::Ln => {
                self.domain(name, idx[0], |x| x > 0.0)?;
                self.unary(idx[0], libm::log)
            }
            Primitive::Sqrt => {
                self.domain(name, idx[0], |x| x >= 0.0)?;
                self.unary(idx[0], libm::sqrt)
            }
            Primitive::Abs => self.unary(idx[0], libm::fabs),
            Primitive::Square => self.unary(idx[0], |x| x * x),
            Primitive::Softplus => self.unary(idx[0], softplus),
            Primitive::Relu => self.unary(idx[0], |x| if x > 0.0 { x } else { 0.0 }),
            Primitive::OuterDiff { lanes, lane } => self.outer_diff_value(name, idx[0], *lanes, *lane)?,
            Primitive::PairDiff { lanes, lane, pairs } => self.pair_diff(name, idx[0], *lanes, *lane, pairs)?,
            Primitive::MaskedWeightedSum { mask, weights } => {
                let x = &self.nodes[idx[0]].value;
                if mask.len() != x.len() || weights.len() != x.len() {
                    return Err(GraphError::ShapeMismatch {
                        primitive: name,
                        left: x.shape().to_vec(),
                        right: vec![mask.len().min(weights.len())],
                    });
                }
                let mut acc = 0.0;
                for ((&xi, &keep), &w) in x.values().iter().zip(mask.iter()).zip(weights.iter()) {
                    if keep {
                        acc += w * xi;
                    }
                }
                Tensor::scalar(acc)
            }
            Primitive::Sum => Tensor::scalar(self.nodes[idx[0]].value.values().iter().sum()),
            Primitive::Mean => {
                let x = &self.nodes[idx[0]].value;
                if x.is_empty() {
                    return Err(GraphError::InvalidArgument {
                        primitive: name,
                        reason: "mean of an empty tensor",
                    });
                }
                Tensor::scalar(x.values().iter().sum::<f64>() / x.len() as f64)
            }
            Primitive::Scale(s) => {
                let s = *s;
                self.unary(idx[0], move |x| s * x)
            }
            Primitive::Clamp { min, max } => {
                if !(min <= max) {
                    return Err(GraphError::InvalidArgument {
                        primitive: name,
                        reason: "clamp bounds out of order",
                    });
                }
                let (lo, hi) = (*min, *max);
                self.unary(idx[0], move |x| x.max(lo).min(hi))
            }
            Primitive::Detach => self.nodes[idx[0]].value.clone(),
        };
        let requires_grad = match primitive {
            Primitive::Detach => false,
            _ => idx[..primitive.arity()].iter().any(|&i| self.nodes[i].requires_grad),
        };
        Ok(self.push(primitive, idx, value, requires_grad))
    }

    fn unary(&self, i: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let x = &self.nodes[i].value;
        Tensor::from_parts(x.shape().to_vec(), x.values().iter().map(|&v| f(v)).collect())
    }

    fn domain(&self, name: &'static str, i: usize, ok: impl Fn(f64) -> bool) -> Result<(), GraphError> {
        match self.nodes[i].value.values().iter().enumerate().find(|(_, &v)| !ok(v)) {
            Some((index, &value)) => Err(GraphError::Domain {
                primitive: name,
                index,
                value,
            }),
            None => Ok(()),
        }
    }

    fn binary(&self, name: &'static str, idx: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Result<Tensor, GraphError> {
        let a = &self.nodes[idx[0]].value;
        let b = &self.nodes[idx[1]].value;
        if a.shape() == b.shape() {
            let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), v))
        } else if is_rank0(b) {
            let y = b.values()[0];
            Ok(Tensor::from_parts(
                a.shape().to_vec(),
                a.values().iter().map(|&x| f(x, y)).collect(),
            ))
        } else if is_rank0(a) {
            let x = a.values()[0];
            Ok(Tensor::from_parts(
                b.shape().to_vec(),
                b.values().iter().map(|&y| f(x, y)).collect(),
            ))
        } else {
            Err(GraphError::ShapeMismatch {
                primitive: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            })
        }
    }

    fn matmul_value(&self, idx: [usize; 2]) -> Result<Tensor, GraphError> {
        let a = &self.nodes[idx[0]].value;
        let b = &self.nodes[idx[1]].value;
        let mismatch = || GraphError::ShapeMismatch {
            primitive: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let (m, k) = a.dims2().ok_or_else(mismatch)?;
        let (k2, n) = b.dims2().ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (a.values(), b.values());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    fn lane_count(&self, name: &'static str, i: usize, lanes: usize, lane: usize) -> Result<usize, GraphError> {
        let x = &self.nodes[i].value;
        if lanes == 0 || lane >= lanes {
            return Err(GraphError::InvalidArgument {
                primitive: name,
                reason: "lane index must be below a non-zero lane count",
            });
        }
        if !x.len().is_multiple_of(lanes) {
            return Err(GraphError::ShapeMismatch {
                primitive: name,
                left: x.shape().to_vec(),
                right: vec![lanes],
            });
        }
        Ok(x.len() / lanes)
    }

    fn outer_diff_value(&self, name: &'static str, i: usize, lanes: usize, lane: usize) -> Result<Tensor, GraphError> {
        let n = self.lane_count(name, i, lanes, lane)?;
        let x = self.nodes[i].value.values();
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            let xi = x[r * lanes + lane];
            out.extend((0..n).map(|c| xi - x[c * lanes + lane]));
        }
        Ok(Tensor::from_parts(vec![n, n], out))
    }

    fn pair_diff(
        &self,
        name: &'static str,
        i: usize,
        lanes: usize,
        lane: usize,
        pairs: &[(u32, u32)],
    ) -> Result<Tensor, GraphError> {
        let n = self.lane_count(name, i, lanes, lane)?;
        let x = self.nodes[i].value.values();
        let mut out = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            let (a, b) = (a as usize, b as usize);
            if a >= n || b >= n {
                return Err(GraphError::InvalidArgument {
                    primitive: name,
                    reason: "pair index out of range",
                });
            }
            out.push(x[a * lanes + lane] - x[b * lanes + lane]);
        }
        Ok(Tensor::vector(out))
    }

    // Convenience wrappers, one per primitive.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Ln, &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Relu, &[x])
    }

    /// Outer difference of a plain vector (single lane).
    pub fn outer_diff(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::OuterDiff { lanes: 1, lane: 0 }, &[x])
    }

    pub fn outer_diff_lane(&mut self, x: NodeId, lanes: usize, lane: usize) -> Result<NodeId, GraphError> {
        self.apply(Primitive::OuterDiff { lanes, lane }, &[x])
    }

    pub fn pair_diff_lane(
        &mut self,
        x: NodeId,
        lanes: usize,
        lane: usize,
        pairs: Arc<[(u32, u32)]>,
    ) -> Result<NodeId, GraphError> {
        self.apply(Primitive::PairDiff { lanes, lane, pairs }, &[x])
    }

    pub fn masked_weighted_sum(
        &mut self,
        x: NodeId,
        mask: Arc<[bool]>,
        weights: Arc<[f64]>,
    ) -> Result<NodeId, GraphError> {
        self.apply(Primitive::MaskedWeightedSum { mask, weights }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Scale(factor), &[x])
    }

    pub fn clamp(&mut self, x: NodeId, min: f64, max: f64) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Clamp { min, max }, &[x])
    }

    pub fn detach(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Detach, &[x])
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Every parameter leaf of the graph appears in the result; leaves with no
    /// path to `root` (or only paths through a detach) get an all-zero tensor.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, GraphError> {
        let r = self.check(root)?;
        let root_value = &self.nodes[r].value;
        if !root_value.is_scalar() {
            return Err(GraphError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        grads[r] = Some(vec![1.0]);

        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.primitive, Primitive::Parameter) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut by_node = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.primitive, Primitive::Parameter) {
                let shape = node.value.shape().to_vec();
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(v) => Tensor::from_parts(shape, v),
                    None => Tensor::zeros(shape),
                };
                by_node.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { by_node })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let [a, b] = node.inputs;
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.primitive {
            Primitive::Parameter | Primitive::Constant | Primitive::Detach => {}
            Primitive::Add | Primitive::Sub => {
                let sign = if matches!(node.primitive, Primitive::Sub) {
                    -1.0
                } else {
                    1.0
                };
                if wants(a) {
                    self.accumulate_broadcast(grads, a, g, |_, gi| gi);
                }
                if wants(b) {
                    self.accumulate_broadcast(grads, b, g, |_, gi| sign * gi);
                }
            }
            Primitive::Mul => {
                let (av, bv) = (self.nodes[a].value.values(), self.nodes[b].value.values());
                if wants(a) {
                    self.accumulate_broadcast(grads, a, g, |k, gi| gi * pick(bv, k));
                }
                if wants(b) {
                    self.accumulate_broadcast(grads, b, g, |k, gi| gi * pick(av, k));
                }
            }
            Primitive::Div => {
                let (av, bv) = (self.nodes[a].value.values(), self.nodes[b].value.values());
                if wants(a) {
                    self.accumulate_broadcast(grads, a, g, |k, gi| gi / pick(bv, k));
                }
                if wants(b) {
                    self.accumulate_broadcast(grads, b, g, |k, gi| {
                        let d = pick(bv, k);
                        -gi * pick(av, k) / (d * d)
                    });
                }
            }
            Primitive::MatMul => {
                let (m, k) = self.nodes[a].value.dims2().expect("checked in forward");
                let n = self.nodes[b].value.shape()[1];
                let (av, bv) = (self.nodes[a].value.values(), self.nodes[b].value.values());
                if wants(a) {
                    let ga = slot(grads, a, m * k);
                    for row in 0..m {
                        let grow = &g[row * n..(row + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[row * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, k * n);
                    for row in 0..m {
                        let grow = &g[row * n..(row + 1) * n];
                        for p in 0..k {
                            let aip = av[row * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gij) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gij;
                            }
                        }
                    }
                }
            }
            Primitive::Exp => {
                let y = node.value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| gi * y[k]);
            }
            Primitive::Ln => {
                let x = self.nodes[a].value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| gi / x[k]);
            }
            Primitive::Sqrt => {
                let x = self.nodes[a].value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| 0.5 * gi / libm::sqrt(x[k].max(SQRT_GRAD_FLOOR)));
            }
            Primitive::Abs => {
                let x = self.nodes[a].value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| gi * sign(x[k]));
            }
            Primitive::Square => {
                let x = self.nodes[a].value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| 2.0 * x[k] * gi);
            }
            Primitive::Softplus => {
                let x = self.nodes[a].value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| gi * sigmoid(x[k]));
            }
            Primitive::Relu => {
                let x = self.nodes[a].value.values();
                self.accumulate_elementwise(grads, a, g, |k, gi| if x[k] > 0.0 { gi } else { 0.0 });
            }
            Primitive::OuterDiff { lanes, lane } => {
                let (lanes, lane) = (*lanes, *lane);
                let len = self.nodes[a].value.len();
                let n = len / lanes;
                let ga = slot(grads, a, len);
                // pair by pair, in the same order as the sparse rule below
                for r in 0..n {
                    for (c, &gij) in g[r * n..(r + 1) * n].iter().enumerate() {
                        ga[r * lanes + lane] += gij;
                        ga[c * lanes + lane] -= gij;
                    }
                }
            }
            Primitive::PairDiff { lanes, lane, pairs } => {
                let (lanes, lane) = (*lanes, *lane);
                let len = self.nodes[a].value.len();
                let ga = slot(grads, a, len);
                for (&(p, q), &gk) in pairs.iter().zip(g) {
                    ga[p as usize * lanes + lane] += gk;
                    ga[q as usize * lanes + lane] -= gk;
                }
            }
            Primitive::MaskedWeightedSum { mask, weights } => {
                let g0 = g[0];
                let len = self.nodes[a].value.len();
                let ga = slot(grads, a, len);
                for ((o, &keep), &w) in ga.iter_mut().zip(mask.iter()).zip(weights.iter()) {
                    if keep {
                        *o += g0 * w;
                    }
                }
            }
            Primitive::Sum => {
                let g0 = g[0];
                self.accumulate_elementwise(grads, a, g, move |_, _| g0);
            }
            Primitive::Mean => {
                let len = self.nodes[a].value.len() as f64;
                let g0 = g[0] / len;
                self.accumulate_elementwise(grads, a, g, move |_, _| g0);
            }
            Primitive::Scale(s) => {
                let s = *s;
                self.accumulate_elementwise(grads, a, g, move |_, gi| s * gi);
            }
            Primitive::Clamp { min, max } => {
                let x = self.nodes[a].value.values();
                let (lo, hi) = (*min, *max);
                self.accumulate_elementwise(grads, a, g, |k, gi| if x[k] >= lo && x[k] <= hi { gi } else { 0.0 });
            }
        }
    }

    /// Adds `f(k, g)` into the input gradient; for reductions `g` is a
    /// single value and `f` ignores it.
    fn accumulate_elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        input: usize,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let len = self.nodes[input].value.len();
        let target = slot(grads, input, len);
        if g.len() == len {
            for (k, (t, &gi)) in target.iter_mut().zip(g).enumerate() {
                *t += f(k, gi);
            }
        } else {
            let g0 = g.first().copied().unwrap_or(0.0);
            for (k, t) in target.iter_mut().enumerate() {
                *t += f(k, g0);
            }
        }
    }

    /// Binary-op gradient accumulation that sums over the broadcast axis when
    /// `input` is the rank-0 side.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        input: usize,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let len = self.nodes[input].value.len();
        let target = slot(grads, input, len);
        if len == g.len() {
            for (k, (t, &gi)) in target.iter_mut().zip(g).enumerate() {
                *t += f(k, gi);
            }
        } else {
            target[0] += g.iter().enumerate().map(|(k, &gi)| f(k, gi)).sum::<f64>();
        }
    }
}

/// Operand value at output position `k`, honouring rank-0 broadcast.
fn pick(values: &[f64], k: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[k]
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

/// Subgradient of `|x|`, with 0 at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
