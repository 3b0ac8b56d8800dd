//! Eager reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every node produced during a forward pass in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks that order in reverse, pushing each node's gradient into its
//! parents. Gradients for parameter leaves land in a caller-owned
//! [`GradStore`] so several graphs (one per example) can share one
//! accumulator.

use std::str::FromStr;

use super::params::{GradStore, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{add_assign, axpy, dot, Tensor};

/// Lower bound applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Score given to masked positions before a softmax.
pub const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive operation together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input or constant.
    Leaf,
    Param(ParamId),
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,k] x [n,k] -> [m,n]`, i.e. `a * b^T`.
    MatMulNt,
    /// `[m,k] x [k] -> [m]`
    MatVec,
    /// `[m] x [m,n] -> [n]`, i.e. `x^T * w`.
    VecMat,
    Add,
    /// `[m,n] + [n]` broadcast over rows.
    AddRow,
    Mul,
    /// Concatenation of rank-1 tensors.
    Concat,
    Slice { start: usize, end: usize },
    Row(usize),
    /// Rank-1 tensors of equal length stacked into a matrix.
    StackRows,
    /// Row lookup into a `[vocab, dim]` table.
    Gather(Vec<usize>),
    Tanh,
    Sigmoid,
    Relu,
    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    Log,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// Softmax of a rank-1 tensor; `false` mask entries get probability 0.
    Softmax(Option<Vec<bool>>),
    Sum,
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::MatMulNt => "matmul_nt",
            Op::MatVec => "matvec",
            Op::VecMat => "vecmat",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Row(_) => "row",
            Op::StackRows => "stack_rows",
            Op::Gather(_) => "gather",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Softmax(_) => "softmax",
            Op::Sum => "sum",
        }
    }
}

/// Parses attribute-free op tags.
impl FromStr for Op {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Self> {
        Ok(match tag {
            "matmul" => Op::MatMul,
            "matmul_nt" => Op::MatMulNt,
            "matvec" => Op::MatVec,
            "vecmat" => Op::VecMat,
            "add" => Op::Add,
            "add_row" => Op::AddRow,
            "mul" => Op::Mul,
            "concat" => Op::Concat,
            "stack_rows" => Op::StackRows,
            "tanh" => Op::Tanh,
            "sigmoid" => Op::Sigmoid,
            "relu" => Op::Relu,
            "log" => Op::Log,
            "neg" => Op::Neg,
            "softmax" => Op::Softmax(None),
            "sum" => Op::Sum,
            "slice" | "row" | "gather" | "scale" | "add_scalar" => {
                return Err(Error::invalid(format!("op `{tag}` requires attributes")))
            }
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Option<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), Some(value), false)
    }

    /// Leaf that receives a gradient, readable with [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), Some(value), true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(Some(node)) = self.param_nodes.get(id.0) {
            return *node;
        }
        let trainable = self.store.is_trainable(id);
        let node = self.push(Op::Param(id), Vec::new(), None, trainable);
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        node_value(&self.nodes, self.store, id)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward root with respect to a non-parameter node.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads[id.0].as_ref()?;
        let shape = self.value(id).shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    /// Records `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), Some(value), requires_grad))
    }

    fn arity(op: &Op, inputs: &[NodeId]) -> Result<()> {
        let expected = match op {
            Op::Leaf | Op::Param(_) => 0,
            Op::MatMul | Op::MatMulNt | Op::MatVec | Op::VecMat | Op::Add | Op::AddRow | Op::Mul => 2,
            Op::Concat | Op::StackRows => {
                if inputs.is_empty() {
                    return Err(Error::invalid(format!("{} needs at least one input", op.tag())));
                }
                return Ok(());
            }
            _ => 1,
        };
        if inputs.len() != expected {
            return Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                op.tag(),
                expected,
                inputs.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor> {
        Self::arity(op, inputs)?;
        let v = |i: usize| self.value(inputs[i]);
        let tag = op.tag();
        match op {
            Op::Leaf | Op::Param(_) => Err(Error::invalid("leaves are created with constant/variable/param")),
            Op::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(Error::shape(tag, a.shape(), b.shape()));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let orow = &mut out.data_mut()[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(a.data()[i * k + p], b.row(p), orow);
                    }
                }
                Ok(out)
            }
            Op::MatMulNt => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                    return Err(Error::shape(tag, a.shape(), b.shape()));
                }
                let (m, n) = (a.rows(), b.rows());
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let ai = a.row(i);
                    out.extend((0..n).map(|j| dot(ai, b.row(j))));
                }
                Tensor::matrix(m, n, out)
            }
            Op::MatVec => {
                let (w, x) = (v(0), v(1));
                if w.rank() != 2 || x.rank() != 1 || w.cols() != x.numel() {
                    return Err(Error::shape(tag, w.shape(), x.shape()));
                }
                Ok(Tensor::vector((0..w.rows()).map(|i| dot(w.row(i), x.data())).collect()))
            }
            Op::VecMat => {
                let (x, w) = (v(0), v(1));
                if x.rank() != 1 || w.rank() != 2 || w.rows() != x.numel() {
                    return Err(Error::shape(tag, x.shape(), w.shape()));
                }
                let mut out = vec![0.0; w.cols()];
                for (i, &xi) in x.data().iter().enumerate() {
                    axpy(xi, w.row(i), &mut out);
                }
                Ok(Tensor::vector(out))
            }
            Op::Add | Op::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(Error::shape(tag, a.shape(), b.shape()));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if matches!(op, Op::Add) { x + y } else { x * y })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::AddRow => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 1 || a.cols() != b.numel() {
                    return Err(Error::shape(tag, a.shape(), b.shape()));
                }
                let mut out = a.clone();
                for i in 0..a.rows() {
                    add_assign(b.data(), out.row_mut(i));
                }
                Ok(out)
            }
            Op::Concat => {
                let mut data = Vec::new();
                for (i, _) in inputs.iter().enumerate() {
                    let t = v(i);
                    if t.rank() != 1 {
                        return Err(Error::shape(tag, v(0).shape(), t.shape()));
                    }
                    data.extend_from_slice(t.data());
                }
                Ok(Tensor::vector(data))
            }
            Op::Slice { start, end } => {
                let a = v(0);
                if a.rank() != 1 || start > end || *end > a.numel() {
                    return Err(Error::shape(tag, a.shape(), &[*start, *end]));
                }
                Ok(Tensor::vector(a.data()[*start..*end].to_vec()))
            }
            Op::Row(i) => {
                let a = v(0);
                if a.rank() != 2 || *i >= a.rows() {
                    return Err(Error::shape(tag, a.shape(), &[*i]));
                }
                Ok(Tensor::vector(a.row(*i).to_vec()))
            }
            Op::StackRows => {
                let first = v(0);
                let mut rows = Vec::with_capacity(inputs.len());
                for (i, _) in inputs.iter().enumerate() {
                    let t = v(i);
                    if t.rank() != 1 || t.numel() != first.numel() {
                        return Err(Error::shape(tag, first.shape(), t.shape()));
                    }
                    rows.push(t.data().to_vec());
                }
                Tensor::from_rows(&rows)
            }
            Op::Gather(ids) => {
                let table = v(0);
                if table.rank() != 2 {
                    return Err(Error::shape(tag, table.shape(), &[ids.len()]));
                }
                let d = table.cols();
                let mut data = Vec::with_capacity(ids.len() * d);
                for (pos, &id) in ids.iter().enumerate() {
                    if id >= table.rows() {
                        return Err(Error::invalid(format!(
                            "token id {id} at position {pos} is outside the vocabulary of {}",
                            table.rows()
                        )));
                    }
                    data.extend_from_slice(table.row(id));
                }
                Tensor::matrix(ids.len(), d, data)
            }
            Op::Tanh => Ok(map(v(0), f64::tanh)),
            Op::Sigmoid => Ok(map(v(0), sigmoid)),
            Op::Relu => Ok(map(v(0), |x| if x > 0.0 { x } else { 0.0 })),
            Op::Log => Ok(map(v(0), |x| x.max(LOG_FLOOR).ln())),
            Op::Neg => Ok(map(v(0), |x| -x)),
            Op::Scale(c) => Ok(map(v(0), |x| c * x)),
            Op::AddScalar(c) => Ok(map(v(0), |x| x + c)),
            Op::Softmax(mask) => {
                let a = v(0);
                if a.rank() != 1 {
                    return Err(Error::shape(tag, a.shape(), &[]));
                }
                if let Some(m) = mask {
                    if m.len() != a.numel() {
                        return Err(Error::shape(tag, a.shape(), &[m.len()]));
                    }
                }
                Ok(Tensor::vector(softmax(a.data(), mask.as_deref())?))
            }
            Op::Sum => Ok(Tensor::scalar(v(0).data().iter().sum())),
        }
    }

    /// Back-propagates from a single-element `root`. Gradients for
    /// non-parameter nodes are kept on the graph; gradients for parameter
    /// leaves are added into `param_grads`.
    pub fn backward(&mut self, root: NodeId, param_grads: &mut GradStore) -> Result<()> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);

        let store = self.store;
        let nodes = &self.nodes;
        let mut sinks = Sinks {
            grads: &mut self.grads,
            params: param_grads,
            nodes,
            store,
        };
        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(gout) = sinks.grads[idx].take() else {
                continue;
            };
            let val = |id: NodeId| node_value(nodes, store, id);
            let out = val(NodeId(idx));
            let p = &node.parents;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul => {
                    let (a, b) = (val(p[0]), val(p[1]));
                    let (m, k, n) = (a.rows(), a.cols(), b.cols());
                    if let Some(da) = sinks.buf(p[0]) {
                        for i in 0..m {
                            let gi = &gout[i * n..(i + 1) * n];
                            for q in 0..k {
                                da[i * k + q] += dot(gi, b.row(q));
                            }
                        }
                    }
                    if let Some(db) = sinks.buf(p[1]) {
                        for i in 0..m {
                            let gi = &gout[i * n..(i + 1) * n];
                            for q in 0..k {
                                axpy(a.data()[i * k + q], gi, &mut db[q * n..(q + 1) * n]);
                            }
                        }
                    }
                }
                Op::MatMulNt => {
                    let (a, b) = (val(p[0]), val(p[1]));
                    let (m, k, n) = (a.rows(), a.cols(), b.rows());
                    if let Some(da) = sinks.buf(p[0]) {
                        for i in 0..m {
                            let dai = &mut da[i * k..(i + 1) * k];
                            for j in 0..n {
                                axpy(gout[i * n + j], b.row(j), dai);
                            }
                        }
                    }
                    if let Some(db) = sinks.buf(p[1]) {
                        for i in 0..m {
                            let ai = a.row(i);
                            for j in 0..n {
                                axpy(gout[i * n + j], ai, &mut db[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                Op::MatVec => {
                    let (w, x) = (val(p[0]), val(p[1]));
                    let k = w.cols();
                    if let Some(dw) = sinks.buf(p[0]) {
                        for (i, &gi) in gout.iter().enumerate() {
                            axpy(gi, x.data(), &mut dw[i * k..(i + 1) * k]);
                        }
                    }
                    if let Some(dx) = sinks.buf(p[1]) {
                        for (i, &gi) in gout.iter().enumerate() {
                            axpy(gi, w.row(i), dx);
                        }
                    }
                }
                Op::VecMat => {
                    let (x, w) = (val(p[0]), val(p[1]));
                    let n = w.cols();
                    if let Some(dx) = sinks.buf(p[0]) {
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d += dot(w.row(i), &gout);
                        }
                    }
                    if let Some(dw) = sinks.buf(p[1]) {
                        for (i, &xi) in x.data().iter().enumerate() {
                            axpy(xi, &gout, &mut dw[i * n..(i + 1) * n]);
                        }
                    }
                }
                Op::Add => {
                    for &q in &p[..2] {
                        if let Some(d) = sinks.buf(q) {
                            add_assign(&gout, d);
                        }
                    }
                }
                Op::AddRow => {
                    let n = val(p[1]).numel();
                    if let Some(da) = sinks.buf(p[0]) {
                        add_assign(&gout, da);
                    }
                    if let Some(db) = sinks.buf(p[1]) {
                        for row in gout.chunks_exact(n) {
                            add_assign(row, db);
                        }
                    }
                }
                Op::Mul => {
                    let (a, b) = (val(p[0]), val(p[1]));
                    if let Some(da) = sinks.buf(p[0]) {
                        for ((d, g), y) in da.iter_mut().zip(&gout).zip(b.data()) {
                            *d += g * y;
                        }
                    }
                    if let Some(db) = sinks.buf(p[1]) {
                        for ((d, g), x) in db.iter_mut().zip(&gout).zip(a.data()) {
                            *d += g * x;
                        }
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &q in p {
                        let len = val(q).numel();
                        if let Some(d) = sinks.buf(q) {
                            add_assign(&gout[offset..offset + len], d);
                        }
                        offset += len;
                    }
                }
                Op::Slice { start, end } => {
                    if let Some(d) = sinks.buf(p[0]) {
                        add_assign(&gout, &mut d[*start..*end]);
                    }
                }
                Op::Row(i) => {
                    let c = gout.len();
                    if let Some(d) = sinks.buf(p[0]) {
                        add_assign(&gout, &mut d[i * c..(i + 1) * c]);
                    }
                }
                Op::StackRows => {
                    let c = out.cols();
                    for (r, &q) in p.iter().enumerate() {
                        if let Some(d) = sinks.buf(q) {
                            add_assign(&gout[r * c..(r + 1) * c], d);
                        }
                    }
                }
                Op::Gather(ids) => {
                    let c = out.cols();
                    if let Some(d) = sinks.buf(p[0]) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_assign(&gout[r * c..(r + 1) * c], &mut d[id * c..(id + 1) * c]);
                        }
                    }
                }
                Op::Tanh => {
                    if let Some(d) = sinks.buf(p[0]) {
                        for ((d, g), y) in d.iter_mut().zip(&gout).zip(out.data()) {
                            *d += g * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid => {
                    if let Some(d) = sinks.buf(p[0]) {
                        for ((d, g), y) in d.iter_mut().zip(&gout).zip(out.data()) {
                            *d += g * y * (1.0 - y);
                        }
                    }
                }
                Op::Relu => {
                    let x = val(p[0]);
                    if let Some(d) = sinks.buf(p[0]) {
                        for ((d, g), x) in d.iter_mut().zip(&gout).zip(x.data()) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Log => {
                    let x = val(p[0]);
                    if let Some(d) = sinks.buf(p[0]) {
                        for ((d, g), x) in d.iter_mut().zip(&gout).zip(x.data()) {
                            if *x >= LOG_FLOOR {
                                *d += g / x;
                            }
                        }
                    }
                }
                Op::Neg => {
                    if let Some(d) = sinks.buf(p[0]) {
                        axpy(-1.0, &gout, d);
                    }
                }
                Op::Scale(c) => {
                    if let Some(d) = sinks.buf(p[0]) {
                        axpy(*c, &gout, d);
                    }
                }
                Op::AddScalar(_) => {
                    if let Some(d) = sinks.buf(p[0]) {
                        add_assign(&gout, d);
                    }
                }
                Op::Softmax(_) => {
                    let y = out.data();
                    let s = dot(&gout, y);
                    if let Some(d) = sinks.buf(p[0]) {
                        for ((d, g), y) in d.iter_mut().zip(&gout).zip(y) {
                            *d += y * (g - s);
                        }
                    }
                }
                Op::Sum => {
                    if let Some(d) = sinks.buf(p[0]) {
                        d.iter_mut().for_each(|d| *d += gout[0]);
                    }
                }
            }
            sinks.grads[idx] = Some(gout);
        }
        Ok(())
    }

    // Typed front ends over `apply`.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulNt, &[a, b])
    }
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MatVec, &[w, x])
    }
    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Op::VecMat, &[x, w])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Slice { start, end }, &[a])
    }
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.apply(Op::Row(i), &[a])
    }
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::StackRows, rows)
    }
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.apply(Op::Gather(ids.to_vec()), &[table])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Neg, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax(None), &[a])
    }
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.apply(Op::Softmax(Some(mask.to_vec())), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
}

struct Sinks<'a, 'n> {
    grads: &'a mut Vec<Option<Vec<f64>>>,
    params: &'a mut GradStore,
    nodes: &'n [Node],
    store: &'n ParamStore,
}

impl Sinks<'_, '_> {
    /// Gradient buffer of `id`, or `None` when it does not need one.
    fn buf(&mut self, id: NodeId) -> Option<&mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        match node.op {
            Op::Param(pid) => Some(self.params.slot(pid, self.store.value(pid).shape()).data_mut()),
            _ => {
                let n = node.value.as_ref().map_or(0, Tensor::numel);
                Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
            }
        }
    }
}

fn node_value<'a>(nodes: &'a [Node], store: &'a ParamStore, id: NodeId) -> &'a Tensor {
    let node = &nodes[id.0];
    match node.op {
        Op::Param(pid) => store.value(pid),
        _ => node.value.as_ref().expect("non-parameter node without value"),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax; masked entries are scored [`MASKED_SCORE`].
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let scores: Vec<f64> = match mask {
        Some(m) => {
            if !m.iter().any(|&k| k) {
                return Err(Error::invalid("softmax: every position is masked"));
            }
            x.iter().zip(m).map(|(&v, &k)| if k { v } else { MASKED_SCORE }).collect()
        }
        None => x.to_vec(),
    };
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Graph, NodeId) -> NodeId, x0: f64) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::vector(vec![x0]));
        let y = f(&mut g, x);
        let root = g.sum(y).unwrap();
        g.backward(root, &mut GradStore::new(&store)).unwrap();
        g.grad(x).unwrap().item()
    }

    #[test]
    fn square_gradient() {
        assert_eq!(scalar_grad(|g, x| g.mul(x, x).unwrap(), 3.0), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        assert_eq!(scalar_grad(|g, x| g.sigmoid(x).unwrap(), 0.0), 0.25);
    }

    #[test]
    fn tanh_at_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![0.0]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matvec_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let i = g.constant(Tensor::identity(3));
        let v = g.constant(Tensor::vector(vec![1.5, -2.0, 7.25]));
        let y = g.matvec(i, v).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 7.25]);
    }

    #[test]
    fn additivity_of_reuse() {
        let twice = scalar_grad(|g, x| g.add(x, x).unwrap(), 1.3);
        let scaled = scalar_grad(|g, x| g.scale(x, 2.0).unwrap(), 1.3);
        assert_eq!(twice, scaled);
        assert_eq!(twice, 2.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unknown_tag_is_rejected() {
        assert!(matches!("conv2d".parse::<Op>(), Err(Error::UnknownOp(_))));
        assert_eq!("tanh".parse::<Op>().unwrap(), Op::Tanh);
        assert!(matches!("row".parse::<Op>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let err = g.backward(x, &mut GradStore::new(&store)).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot(_)));
    }

    #[test]
    fn inputs_are_not_modified() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::vector(vec![1.0, -1.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s, &mut GradStore::new(&store)).unwrap();
        assert_eq!(g.value(x).data(), &[1.0, -1.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let p = softmax(&[3.0, 100.0, 1.0], Some(&[true, false, true])).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(softmax(&[1.0], Some(&[false])).is_err());
    }

    #[test]
    fn param_gradients_land_in_grad_store() {
        let mut store = ParamStore::new();
        let grp = store.add_group("g", crate::autodiff::ParamCategory::Shared);
        let w = store.add(grp, "w", Tensor::vector(vec![2.0, -1.0]));
        let mut g = Graph::new(&store);
        let wn = g.param(w);
        assert_eq!(g.param(w), wn);
        let sq = g.mul(wn, wn).unwrap();
        let s = g.sum(sq).unwrap();
        let mut grads = GradStore::new(&store);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, -2.0]);
    }
}
