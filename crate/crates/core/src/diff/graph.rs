//! Define-by-run computation graph over dense tensors.
//!
//! Nodes are appended in topological order; each op is evaluated eagerly
//! when pushed and can be re-evaluated in place with [`Graph::forward`]
//! after leaf values change. [`Graph::backward`] walks the tape in reverse
//! and sums gradients over fan-out.

use std::fmt;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, strides, Tensor};
use crate::voxel::KernelMap;

use super::GraphError;

/// Index of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalisation statistics source.
#[derive(Clone, Debug)]
pub enum BnMode<T> {
    /// Normalise with the statistics of the current rows.
    Train,
    /// Normalise with stored running statistics.
    Infer { mean: Vec<T>, var: Vec<T> },
}

/// User-supplied primitive with explicit forward and backward rules.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, String>;
    /// Gradients with respect to each input, in order.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, usize),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<T>,
        eps: T,
    },
    MeanRows(NodeId),
    Concat(Vec<NodeId>, usize),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId, Vec<usize>),
    L2Normalize(NodeId, T),
    RowNorm(NodeId),
    SumAxis(NodeId, usize),
    MaxAxis(NodeId, usize),
    SumAll(NodeId),
    Gather(NodeId, Arc<[usize]>),
    ScatterAdd(NodeId, Arc<[usize]>, usize),
    SparseConv(NodeId, NodeId, Arc<KernelMap>),
    ChannelConv1d(NodeId, NodeId, NodeId),
    Custom(Arc<dyn CustomOp<T>>, Vec<NodeId>),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MeanRows(..) => "mean_rows",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::L2Normalize(..) => "l2_normalize",
            Op::RowNorm(..) => "row_norm",
            Op::SumAxis(..) => "sum_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::SumAll(..) => "sum_all",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::SparseConv(..) => "sparse_conv",
            Op::ChannelConv1d(..) => "channel_conv1d",
            Op::Custom(c, _) => c.name(),
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SparseConv(a, b, _) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x, _)
            | Op::MeanRows(x)
            | Op::Narrow { x, .. }
            | Op::Reshape(x, _)
            | Op::L2Normalize(x, _)
            | Op::RowNorm(x)
            | Op::SumAxis(x, _)
            | Op::MaxAxis(x, _)
            | Op::SumAll(x)
            | Op::Gather(x, _)
            | Op::ScatterAdd(x, _, _) => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ChannelConv1d(x, w, b) => vec![*x, *w, *b],
            Op::Concat(parts, _) | Op::Custom(_, parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) enum Aux<T> {
    #[default]
    None,
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Norms(Vec<T>),
    Argmax(Vec<usize>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    aux: Aux<T>,
    requires_grad: bool,
    label: Option<String>,
    tag: Option<&'static str>,
    flops: u64,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Directed acyclic tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    tag: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tag: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to every node created until the next call.
    pub fn set_tag(&mut self, tag: Option<&'static str>) {
        self.tag = tag;
    }

    /// Estimated floating-point operations of all nodes carrying `tag`.
    pub fn flops_with_tag(&self, tag: &str) -> u64 {
        self.nodes.iter().filter(|n| n.tag == Some(tag)).map(|n| n.flops).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].label.as_deref()
    }

    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// Leaves that require gradients, in creation order.
    pub fn grad_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Batch statistics (mean, biased variance) computed by a training-mode
    /// batch-norm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].aux {
            Aux::Bn { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            aux: Aux::None,
            requires_grad,
            label: None,
            tag: self.tag,
            flops: 0,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, label: impl Into<String>, value: Tensor<T>) -> NodeId {
        let id = self.leaf(value, true);
        self.nodes[id.0].label = Some(label.into());
        id
    }

    /// Replaces a leaf value; call [`Graph::forward`] to propagate.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<T>) -> Result<(), GraphError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(GraphError::NotALeaf { node: id.0 });
        }
        if node.value.shape() != value.shape() {
            return Err(GraphError::Shape {
                node: id.0,
                op: "leaf",
                detail: format!("expected {:?}, got {:?}", node.value.shape(), value.shape()),
            });
        }
        node.value = value;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, id: NodeId) -> &mut [T] {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        self.nodes[id.0].value.data_mut()
    }

    /// Re-evaluates every non-leaf node in topological order.
    pub fn forward(&mut self) -> Result<(), GraphError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux, _) = self.eval(i, &op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId, GraphError> {
        let idx = self.nodes.len();
        let (value, aux, flops) = self.eval(idx, &op)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
            label: None,
            tag: self.tag,
            flops,
        });
        Ok(NodeId(idx))
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn shape_err(&self, node: usize, op: &'static str, detail: String) -> GraphError {
        GraphError::Shape { node, op, detail }
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => format!("#{} '{}' {:?}", id.0, l, self.val(id).shape()),
            None => format!("#{} {} {:?}", id.0, self.nodes[id.0].op.name(), self.val(id).shape()),
        }
    }

    // ---- op constructors -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Transpose(x))
    }
    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId, GraphError> {
        self.push(Op::Scale(x, s))
    }
    pub fn add_scalar(&mut self, x: NodeId, s: T) -> Result<NodeId, GraphError> {
        self.push(Op::AddScalar(x, s))
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu(x))
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sigmoid(x))
    }
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Softmax(x, axis))
    }
    /// Per-column normalisation of a `rows × C` tensor.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode<T>,
        eps: T,
    ) -> Result<NodeId, GraphError> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            mode,
            eps,
        })
    }
    /// Average over rows: `N × C → 1 × C`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MeanRows(x))
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Concat(parts.to_vec(), axis))
    }
    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let mut reshaped = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            reshaped.push(self.reshape(p, &s)?);
        }
        self.concat(&reshaped, 0)
    }
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Narrow { x, axis, start, len })
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.push(Op::Reshape(x, shape.to_vec()))
    }
    /// Row-wise `x / max(‖x‖₂, 1e-12)` over the trailing axis.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::L2Normalize(x, T::of(1e-12)))
    }
    /// Row-wise Euclidean norm: `N × C → N`.
    pub fn row_norm(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::RowNorm(x))
    }
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SumAxis(x, axis))
    }
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        self.push(Op::MaxAxis(x, axis))
    }
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::SumAll(x))
    }
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let n = self.val(x).len().max(1);
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }
    /// Row gather: `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: NodeId, idx: impl Into<Arc<[usize]>>) -> Result<NodeId, GraphError> {
        self.push(Op::Gather(x, idx.into()))
    }
    /// Row scatter-add: `out[idx[i]] += x[i]`, `out` has `rows` rows.
    pub fn scatter_add(&mut self, x: NodeId, idx: impl Into<Arc<[usize]>>, rows: usize) -> Result<NodeId, GraphError> {
        self.push(Op::ScatterAdd(x, idx.into(), rows))
    }
    /// Sparse convolution driven by a kernel map; `w` is `K × C_in × C_out`.
    pub fn sparse_conv(&mut self, x: NodeId, w: NodeId, map: Arc<KernelMap>) -> Result<NodeId, GraphError> {
        self.push(Op::SparseConv(x, w, map))
    }
    /// 1-D convolution along the channel axis of each row, zero padded;
    /// `w` has odd length, `b` is a single bias.
    pub fn channel_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::ChannelConv1d(x, w, b))
    }
    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    /// `x·W (+ b)` for `x: N × in`, `W: in × out`, `b: out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, GraphError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- forward rules ---------------------------------------------------

    fn eval(&self, idx: usize, op: &Op<T>) -> Result<(Tensor<T>, Aux<T>, u64), GraphError> {
        let name = op.name();
        let err = |detail: String| self.shape_err(idx, name, detail);
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
                    return Err(err(format!("{} · {}", self.describe(*a), self.describe(*b))));
                }
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut c = vec![T::zero(); m * n];
                gemm_acc(av.data(), bv.data(), &mut c, m, k, n);
                (Tensor::new(vec![m, n], c), Aux::None, (2 * m * k * n) as u64)
            }
            Op::Transpose(x) => {
                let xv = self.val(*x);
                if xv.shape().len() != 2 {
                    return Err(err(format!("transpose of non-matrix {}", self.describe(*x))));
                }
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                (transpose2(xv.data(), r, c), Aux::None, 0)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let shape = broadcast_shape(av.shape(), bv.shape())
                    .ok_or_else(|| err(format!("cannot broadcast {} with {}", self.describe(*a), self.describe(*b))))?;
                let f: fn(T, T) -> T = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = if av.shape() == bv.shape() {
                    let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
                    Tensor::new(shape, d)
                } else {
                    let (ai, bi) = broadcast_index(&shape, av.shape(), bv.shape());
                    let d = ai.iter().zip(&bi).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect();
                    Tensor::new(shape, d)
                };
                let n = out.len() as u64;
                (out, Aux::None, n)
            }
            Op::Scale(x, s) => {
                let v = self.val(*x).map(|a| a * *s);
                let n = v.len() as u64;
                (v, Aux::None, n)
            }
            Op::AddScalar(x, s) => {
                let v = self.val(*x).map(|a| a + *s);
                let n = v.len() as u64;
                (v, Aux::None, n)
            }
            Op::Relu(x) => {
                let v = self.val(*x).map(|a| if a > T::zero() { a } else { T::zero() });
                let n = v.len() as u64;
                (v, Aux::None, n)
            }
            Op::Sigmoid(x) => {
                let v = self.val(*x).map(sigmoid);
                let n = 4 * v.len() as u64;
                (v, Aux::None, n)
            }
            Op::Softmax(x, axis) => {
                let xv = self.val(*x);
                if *axis >= xv.shape().len() {
                    return Err(err(format!("axis {axis} out of range for {}", self.describe(*x))));
                }
                let v = softmax_axis(xv, *axis);
                let n = 5 * v.len() as u64;
                (v, Aux::None, n)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                eps,
            } => {
                let xv = self.val(*x);
                if xv.shape().len() != 2 {
                    return Err(err(format!("batch norm expects rows × channels, got {}", self.describe(*x))));
                }
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let (g, b) = (self.val(*gamma), self.val(*beta));
                if g.len() != c || b.len() != c {
                    return Err(err(format!(
                        "affine params {} / {} do not match {c} channels",
                        self.describe(*gamma),
                        self.describe(*beta)
                    )));
                }
                let (mean, var) = match mode {
                    BnMode::Train => column_moments(xv.data(), n, c),
                    BnMode::Infer { mean, var } => {
                        if mean.len() != c || var.len() != c {
                            return Err(err(format!("running stats of width {} for {c} channels", mean.len())));
                        }
                        (mean.clone(), var.clone())
                    }
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); n * c];
                let mut y = vec![T::zero(); n * c];
                for r in 0..n {
                    for j in 0..c {
                        let h = (xv.data()[r * c + j] - mean[j]) * inv_std[j];
                        xhat[r * c + j] = h;
                        y[r * c + j] = g.data()[j] * h + b.data()[j];
                    }
                }
                (
                    Tensor::new(vec![n, c], y),
                    Aux::Bn {
                        xhat,
                        inv_std,
                        mean,
                        var,
                    },
                    (6 * n * c) as u64,
                )
            }
            Op::MeanRows(x) => {
                let xv = self.val(*x);
                if xv.shape().len() != 2 || xv.shape()[0] == 0 {
                    return Err(err(format!("mean over rows of {}", self.describe(*x))));
                }
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let mut out = column_sums(xv.data(), n, c);
                let inv = T::one() / T::of(n as f64);
                out.iter_mut().for_each(|o| *o *= inv);
                (Tensor::new(vec![1, c], out), Aux::None, (n * c) as u64)
            }
            Op::Concat(parts, axis) => {
                if parts.is_empty() {
                    return Err(err("concat of zero tensors".into()));
                }
                let first = self.val(parts[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(err(format!("axis {axis} out of range for {}", self.describe(parts[0]))));
                }
                let mut total = 0;
                for &p in parts {
                    let s = self.val(p).shape();
                    let same = s.len() == first.len()
                        && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                    if !same {
                        return Err(err(format!(
                            "{} incompatible with {} along axis {axis}",
                            self.describe(p),
                            self.describe(parts[0])
                        )));
                    }
                    total += s[*axis];
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for &p in parts {
                        let pv = self.val(p);
                        let chunk = pv.shape()[*axis] * inner;
                        data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                (Tensor::new(shape, data), Aux::None, 0)
            }
            Op::Narrow { x, axis, start, len } => {
                let xv = self.val(*x);
                let s = xv.shape();
                if *axis >= s.len() || start + len > s[*axis] || *len == 0 {
                    return Err(err(format!("narrow [{start}, {}) on axis {axis} of {}", start + len, self.describe(*x))));
                }
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    data.extend_from_slice(&xv.data()[base..base + len * inner]);
                }
                let mut shape = s.to_vec();
                shape[*axis] = *len;
                (Tensor::new(shape, data), Aux::None, 0)
            }
            Op::Reshape(x, shape) => {
                let xv = self.val(*x);
                if shape.iter().product::<usize>() != xv.len() {
                    return Err(err(format!("reshape {} to {shape:?}", self.describe(*x))));
                }
                (xv.clone().reshaped(shape), Aux::None, 0)
            }
            Op::L2Normalize(x, eps) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let rows = xv.len() / c.max(1);
                let mut norms = Vec::with_capacity(rows);
                let mut data = xv.data().to_vec();
                for r in 0..rows {
                    let row = &mut data[r * c..(r + 1) * c];
                    let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let d = nrm.max(*eps);
                    row.iter_mut().for_each(|v| *v /= d);
                    norms.push(nrm);
                }
                (Tensor::new(xv.shape().to_vec(), data), Aux::Norms(norms), 3 * xv.len() as u64)
            }
            Op::RowNorm(x) => {
                let xv = self.val(*x);
                if xv.shape().len() != 2 {
                    return Err(err(format!("row norm expects a matrix, got {}", self.describe(*x))));
                }
                let rows = xv.rows();
                let d: Vec<T> = (0..rows)
                    .map(|r| xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt())
                    .collect();
                (Tensor::new(vec![rows], d), Aux::None, 2 * xv.len() as u64)
            }
            Op::SumAxis(x, axis) | Op::MaxAxis(x, axis) => {
                let xv = self.val(*x);
                let s = xv.shape();
                if *axis >= s.len() {
                    return Err(err(format!("axis {axis} out of range for {}", self.describe(*x))));
                }
                let outer: usize = s[..*axis].iter().product();
                let len = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let mut out = vec![T::zero(); outer * inner];
                let mut arg = Vec::new();
                let is_max = matches!(op, Op::MaxAxis(..));
                if is_max {
                    arg = vec![0usize; outer * inner];
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| xv.data()[(o * len + j) * inner + i];
                        if is_max {
                            let mut best = 0;
                            for j in 1..len {
                                if at(j) > at(best) {
                                    best = j;
                                }
                            }
                            out[o * inner + i] = at(best);
                            arg[o * inner + i] = best;
                        } else {
                            out[o * inner + i] = (0..len).map(at).sum();
                        }
                    }
                }
                let mut shape: Vec<usize> = s.iter().enumerate().filter(|(d, _)| d != axis).map(|(_, &v)| v).collect();
                if shape.is_empty() {
                    shape.push(1);
                }
                let aux = if is_max { Aux::Argmax(arg) } else { Aux::None };
                (Tensor::new(shape, out), aux, xv.len() as u64)
            }
            Op::SumAll(x) => {
                let xv = self.val(*x);
                (Tensor::scalar(xv.sum()), Aux::None, xv.len() as u64)
            }
            Op::Gather(x, idx) => {
                let xv = self.val(*x);
                if xv.shape().len() != 2 {
                    return Err(err(format!("gather expects a matrix, got {}", self.describe(*x))));
                }
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    if i >= n {
                        return Err(err(format!("gather index {i} out of {n} rows of {}", self.describe(*x))));
                    }
                    data.extend_from_slice(xv.row(i));
                }
                (Tensor::new(vec![idx.len(), c], data), Aux::None, 0)
            }
            Op::ScatterAdd(x, idx, rows) => {
                let xv = self.val(*x);
                if xv.shape().len() != 2 || xv.shape()[0] != idx.len() {
                    return Err(err(format!("{} rows for {} scatter indices", self.describe(*x), idx.len())));
                }
                let c = xv.shape()[1];
                let mut data = vec![T::zero(); rows * c];
                for (r, &i) in idx.iter().enumerate() {
                    if i >= *rows {
                        return Err(err(format!("scatter index {i} out of {rows} rows")));
                    }
                    for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(xv.row(r)) {
                        *o += v;
                    }
                }
                (Tensor::new(vec![*rows, c], data), Aux::None, xv.len() as u64)
            }
            Op::SparseConv(x, w, map) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let ws = wv.shape();
                if xv.shape().len() != 2 || ws.len() != 3 {
                    return Err(err(format!("sparse conv of {} with {}", self.describe(*x), self.describe(*w))));
                }
                let (cin, cout) = (ws[1], ws[2]);
                if xv.shape()[1] != cin || xv.shape()[0] != map.input_len() || ws[0] != map.kernel_volume() {
                    return Err(err(format!(
                        "input {} / weights {} do not match kernel map (inputs {}, offsets {})",
                        self.describe(*x),
                        self.describe(*w),
                        map.input_len(),
                        map.kernel_volume()
                    )));
                }
                let mut y = vec![T::zero(); map.output_len() * cout];
                for (off, pairs) in map.pairs_by_offset().iter().enumerate() {
                    let wk = &wv.data()[off * cin * cout..(off + 1) * cin * cout];
                    for &(i, o) in pairs {
                        let (i, o) = (i as usize, o as usize);
                        gemm_acc(xv.row(i), wk, &mut y[o * cout..(o + 1) * cout], 1, cin, cout);
                    }
                }
                let fl = 2 * map.triples().len() * cin * cout;
                (Tensor::new(vec![map.output_len(), cout], y), Aux::None, fl as u64)
            }
            Op::ChannelConv1d(x, w, b) => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                if wv.len() % 2 == 0 || bv.len() != 1 || xv.shape().len() != 2 {
                    return Err(err(format!(
                        "channel conv of {} with {} and {}",
                        self.describe(*x),
                        self.describe(*w),
                        self.describe(*b)
                    )));
                }
                let (rows, c) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.len();
                let half = (k / 2) as isize;
                let mut y = vec![bv.data()[0]; rows * c];
                for r in 0..rows {
                    let xr = xv.row(r);
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for (j, &wj) in wv.data().iter().enumerate() {
                            let src = ch as isize + j as isize - half;
                            if src >= 0 && (src as usize) < c {
                                acc += wj * xr[src as usize];
                            }
                        }
                        y[r * c + ch] += acc;
                    }
                }
                (Tensor::new(vec![rows, c], y), Aux::None, (2 * rows * c * k) as u64)
            }
            Op::Custom(c, inputs) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.val(i)).collect();
                let v = c.forward(&vals).map_err(err)?;
                (v, Aux::None, 0)
            }
        };
        Ok(out)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>, GraphError> {
        let v = self.val(output);
        if v.len() != 1 {
            return Err(GraphError::NonScalarOutput {
                node: output.0,
                shape: v.shape().to_vec(),
            });
        }
        self.backward_seeded(output, Tensor::new(v.shape().to_vec(), vec![T::one()]))
    }

    /// Reverse pass seeded with an upstream gradient of `output`'s shape.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>, GraphError> {
        if seed.shape() != self.val(output).shape() {
            return Err(GraphError::Shape {
                node: output.0,
                op: "backward",
                detail: format!("seed {:?} for output {:?}", seed.shape(), self.val(output).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.val(id).shape(), "grad shape for node {}", id.0);
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                self.accumulate(grads, *x, transpose2(g.data(), r, c));
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let same = av.shape() == bv.shape();
                let (ai, bi) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    broadcast_index(y.shape(), av.shape(), bv.shape())
                };
                let ia = |o: usize| if same { o } else { ai[o] };
                let ib = |o: usize| if same { o } else { bi[o] };
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); av.len()];
                    for (o, &gv) in g.data().iter().enumerate() {
                        let d = match node.op {
                            Op::Mul(..) => gv * bv.data()[ib(o)],
                            _ => gv,
                        };
                        ga[ia(o)] += d;
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for (o, &gv) in g.data().iter().enumerate() {
                        let d = match node.op {
                            Op::Mul(..) => gv * av.data()[ia(o)],
                            Op::Sub(..) => -gv,
                            _ => gv,
                        };
                        gb[ib(o)] += d;
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar(x, _) | Op::Reshape(x, _) => {
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape));
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d));
            }
            Op::Softmax(x, axis) => {
                let s = y.shape();
                let outer: usize = s[..*axis].iter().product();
                let len = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), d));
            }
            Op::BatchNorm {
                x, gamma, beta, mode, ..
            } => {
                let Aux::Bn { xhat, inv_std, .. } = &node.aux else {
                    unreachable!("batch norm without saved statistics")
                };
                let (n, c) = (y.shape()[0], y.shape()[1]);
                let gam = self.val(*gamma).data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        let gv = g.data()[r * c + j];
                        dg[j] += gv * xhat[r * c + j];
                        db[j] += gv;
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * c];
                    match mode {
                        BnMode::Train => {
                            let nf = T::of(n as f64);
                            for r in 0..n {
                                for j in 0..c {
                                    // dxhat sums: Σ dxhat = γ·db, Σ dxhat·xhat = γ·dg
                                    let dxh = g.data()[r * c + j] * gam[j];
                                    dx[r * c + j] = inv_std[j] / nf
                                        * (nf * dxh - gam[j] * db[j] - xhat[r * c + j] * gam[j] * dg[j]);
                                }
                            }
                        }
                        BnMode::Infer { .. } => {
                            for r in 0..n {
                                for j in 0..c {
                                    dx[r * c + j] = g.data()[r * c + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, c], dx));
                }
                let gshape = self.val(*gamma).shape().to_vec();
                let bshape = self.val(*beta).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dg));
                self.accumulate(grads, *beta, Tensor::new(bshape, db));
            }
            Op::MeanRows(x) => {
                let xs = self.val(*x).shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let inv = T::one() / T::of(n as f64);
                let mut d = Vec::with_capacity(n * c);
                for _ in 0..n {
                    d.extend(g.data().iter().map(|&v| v * inv));
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::Concat(parts, axis) => {
                let s = y.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let total = s[*axis];
                let mut start = 0;
                for &p in parts {
                    let ps = self.val(p).shape().to_vec();
                    let len = ps[*axis];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, d));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let xs = self.val(*x).shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut d = vec![T::zero(); xs.iter().product()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::L2Normalize(x, eps) => {
                let Aux::Norms(norms) = &node.aux else {
                    unreachable!("normalisation without saved norms")
                };
                let c = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dr = &mut d[r * c..(r + 1) * c];
                    if nrm > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = (gr[j] - yr[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..c {
                            dr[j] = gr[j] / *eps;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d));
            }
            Op::RowNorm(x) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut d = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let nrm = y.data()[r];
                    if nrm > T::zero() {
                        let s = g.data()[r] / nrm;
                        for j in 0..c {
                            d[r * c + j] = s * xv.data()[r * c + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::SumAxis(x, axis) | Op::MaxAxis(x, axis) => {
                let xs = self.val(*x).shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut d = vec![T::zero(); xs.iter().product()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g.data()[o * inner + i];
                        match &node.aux {
                            Aux::Argmax(arg) => d[(o * len + arg[o * inner + i]) * inner + i] = gv,
                            _ => {
                                for j in 0..len {
                                    d[(o * len + j) * inner + i] = gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::SumAll(x) => {
                let xs = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&xs, g.data()[0]));
            }
            Op::Gather(x, idx) => {
                let xs = self.val(*x).shape().to_vec();
                let c = xs[1];
                let mut d = vec![T::zero(); xs[0] * c];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, d));
            }
            Op::ScatterAdd(x, idx, _) => {
                let c = g.cols();
                let mut d = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    d.extend_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(vec![idx.len(), c], d));
            }
            Op::SparseConv(x, w, map) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (cin, cout) = (wv.shape()[1], wv.shape()[2]);
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut wk_t = vec![T::zero(); cin * cout];
                for (off, pairs) in map.pairs_by_offset().iter().enumerate() {
                    let wk = &wv.data()[off * cin * cout..(off + 1) * cin * cout];
                    if want_x {
                        for a in 0..cin {
                            for b in 0..cout {
                                wk_t[b * cin + a] = wk[a * cout + b];
                            }
                        }
                    }
                    for &(i, o) in pairs {
                        let (i, o) = (i as usize, o as usize);
                        let go = &g.data()[o * cout..(o + 1) * cout];
                        if want_x {
                            gemm_acc(go, &wk_t, &mut dx[i * cin..(i + 1) * cin], 1, cout, cin);
                        }
                        if want_w {
                            let dwk = &mut dw[off * cin * cout..(off + 1) * cin * cout];
                            gemm_tn_acc(xv.row(i), go, dwk, cin, 1, cout);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                }
            }
            Op::ChannelConv1d(x, w, b) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (rows, c) = (xv.shape()[0], xv.shape()[1]);
                let half = (wv.len() / 2) as isize;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let mut dbias = T::zero();
                for r in 0..rows {
                    for ch in 0..c {
                        let gv = g.data()[r * c + ch];
                        dbias += gv;
                        for (j, &wj) in wv.data().iter().enumerate() {
                            let src = ch as isize + j as isize - half;
                            if src >= 0 && (src as usize) < c {
                                let s = src as usize;
                                dx[r * c + s] += gv * wj;
                                dw[j] += gv * xv.data()[r * c + s];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                let bshape = self.val(*b).shape().to_vec();
                self.accumulate(grads, *b, Tensor::new(bshape, vec![dbias]));
            }
            Op::Custom(c, inputs) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.val(i)).collect();
                let gs = c.backward(&vals, y, g);
                for (&i, gi) in inputs.iter().zip(gs) {
                    self.accumulate(grads, i, gi);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn transpose2<T: Scalar>(d: &[T], r: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Max-subtracted softmax along `axis`.
pub(crate) fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x.data()[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..len {
                let e = (x.data()[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn column_moments<T: Scalar>(x: &[T], n: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let nf = n.max(1) as f64;
    let mut buf = Vec::with_capacity(n);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for j in 0..c {
        buf.clear();
        buf.extend((0..n).map(|r| x[r * c + j].as_f64()));
        let m = order_free_sum(&buf) / nf;
        buf.iter_mut().for_each(|v| *v = (*v - m) * (*v - m));
        mean[j] = T::of(m);
        var[j] = T::of(order_free_sum(&buf) / nf);
    }
    (mean, var)
}

/// Sum whose result does not depend on the order of `v`.
///
/// Every value is rounded once onto a fixed-point grid 2^-100 below the
/// largest magnitude and the integers are added exactly.
pub(crate) fn order_free_sum(v: &[f64]) -> f64 {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() || max < f64::MIN_POSITIVE || v.len() > 1 << 26 {
        let mut sorted = v.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        return sorted.iter().sum();
    }
    let exp = ((max.to_bits() >> 52) & 0x7ff) as i32 - 1022;
    let shift = 100 - exp;
    let up = |x: f64| x * pow2(shift / 2) * pow2(shift - shift / 2);
    let total: i128 = v.iter().map(|&x| up(x) as i128).sum();
    total as f64 * pow2(-(shift / 2)) * pow2(-(shift - shift / 2))
}

fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Per-column sums of an `n × c` row-major block, independent of row order.
pub(crate) fn column_sums<T: Scalar>(x: &[T], n: usize, c: usize) -> Vec<T> {
    let mut buf = Vec::with_capacity(n);
    (0..c)
        .map(|j| {
            buf.clear();
            buf.extend((0..n).map(|r| x[r * c + j].as_f64()));
            T::of(order_free_sum(&buf))
        })
        .collect()
}

/// Numpy-style broadcast of two shapes aligned on trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source indices of `a` and `b` for each element of the broadcast output.
fn broadcast_index(out: &[usize], a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = out.len();
    let padded = |s: &[usize]| {
        let mut p = vec![1; n - s.len()];
        p.extend_from_slice(s);
        let st = strides(&p);
        p.iter().zip(st).map(|(&d, s)| if d == 1 { 0 } else { s }).collect::<Vec<_>>()
    };
    let (sa, sb) = (padded(a), padded(b));
    let total: usize = out.iter().product();
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let (mut pa, mut pb) = (0usize, 0usize);
    for _ in 0..total {
        ia.push(pa);
        ib.push(pb);
        for d in (0..n).rev() {
            counter[d] += 1;
            pa += sa[d];
            pb += sb[d];
            if counter[d] < out[d] {
                break;
            }
            pa -= sa[d] * out[d];
            pb -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
    (ia, ib)
}
