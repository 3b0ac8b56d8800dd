//! Layers built on the graph: embedding lookup, LSTM / Bi-LSTM, additive
//! and dot-product attention, dense layers and dropout.
//!
//! Every layer is a plain struct of [`ParamId`]s plus dimensions; the
//! forward functions take the graph explicitly so one parameter set can be
//! evaluated by many independent graphs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GroupId, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Limit of the uniform range used for randomly initialized word vectors.
pub const EMBEDDING_INIT_RANGE: f64 = 0.05;
/// Added to the forget-gate bias at initialization.
pub const FORGET_BIAS: f64 = 1.0;

pub fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Glorot/Xavier uniform: limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_out, fan_in], limit, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Table stored as `[vocab_size, dim]` (one row per token id). Row 0 is
    /// the padding vector and starts at zero.
    pub fn new(store: &mut ParamStore, group: GroupId, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut t = uniform(&[vocab_size, dim], EMBEDDING_INIT_RANGE, rng);
        if vocab_size > 0 {
            t.row_mut(0).fill(0.0);
        }
        let table = store.add(group, "embedding", t);
        Self { table, vocab_size, dim }
    }
}

/// Sequence of word vectors `[n, dim]` for `token_ids`.
pub fn embedding_lookup(g: &mut Graph, table: &EmbeddingTable, token_ids: &[usize]) -> Result<NodeId> {
    if token_ids.is_empty() {
        return Err(Error::invalid("embedding lookup on an empty token sequence"));
    }
    if let Some((pos, id)) = token_ids.iter().enumerate().find(|(_, &id)| id >= table.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {id} at position {pos} is outside the vocabulary of {}",
            table.vocab_size
        )));
    }
    let t = g.param(table.table);
    g.gather(t, token_ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(group, format!("{name}.weight"), glorot_uniform(output_dim, input_dim, rng));
        let bias = store.add(group, format!("{name}.bias"), Tensor::zeros(&[output_dim]));
        Self {
            weight,
            bias,
            activation,
            input_dim,
            output_dim,
        }
    }

    pub fn scalars(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// `activation(W x + b)`
pub fn dense(g: &mut Graph, layer: &Dense, x: NodeId) -> Result<NodeId> {
    let xs = g.value(x).shape();
    if xs != [layer.input_dim] {
        return Err(Error::shape("dense", &[layer.output_dim, layer.input_dim], xs));
    }
    let w = g.param(layer.weight);
    let b = g.param(layer.bias);
    let wx = g.matvec(w, x)?;
    let z = g.add(wx, b)?;
    match layer.activation {
        Activation::Identity => Ok(z),
        Activation::Relu => g.relu(z),
        Activation::Sigmoid => g.sigmoid(z),
        Activation::Softmax => g.softmax(z),
    }
}

/// Standard LSTM cell without peepholes. The stacked gate rows are
/// ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_ih = store.add(group, format!("{name}.w_ih"), glorot_uniform(4 * hidden, input_dim, rng));
        let w_hh = store.add(group, format!("{name}.w_hh"), glorot_uniform(4 * hidden, hidden, rng));
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
        let bias = store.add(group, format!("{name}.bias"), b);
        Self {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden,
        }
    }

    pub fn scalars(&self) -> usize {
        4 * self.hidden * (self.input_dim + self.hidden + 1)
    }
}

/// One LSTM transition; returns `(h_t, c_t)`.
pub fn lstm_step(g: &mut Graph, cell: &LstmCell, x: NodeId, h_prev: NodeId, c_prev: NodeId) -> Result<(NodeId, NodeId)> {
    let d = cell.hidden;
    if g.value(x).shape() != [cell.input_dim] {
        return Err(Error::shape("lstm_step", &[cell.input_dim], g.value(x).shape()));
    }
    for state in [h_prev, c_prev] {
        if g.value(state).shape() != [d] {
            return Err(Error::shape("lstm_step", &[d], g.value(state).shape()));
        }
    }
    let w_ih = g.param(cell.w_ih);
    let w_hh = g.param(cell.w_hh);
    let b = g.param(cell.bias);
    let zx = g.matvec(w_ih, x)?;
    let zh = g.matvec(w_hh, h_prev)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, b)?;

    let zi = g.slice(z, 0, d)?;
    let zf = g.slice(z, d, 2 * d)?;
    let zg = g.slice(z, 2 * d, 3 * d)?;
    let zo = g.slice(z, 3 * d, 4 * d)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one direction over the rows of `x` in the given order. Masked
/// positions carry the previous state through unchanged.
fn lstm_scan(
    g: &mut Graph,
    cell: &LstmCell,
    x: NodeId,
    mask: &[bool],
    order: impl Iterator<Item = usize>,
) -> Result<Vec<NodeId>> {
    let n = mask.len();
    let mut h = g.constant(Tensor::zeros(&[cell.hidden]));
    let mut c = g.constant(Tensor::zeros(&[cell.hidden]));
    let mut out = vec![h; n];
    for t in order {
        if mask[t] {
            let xt = g.row(x, t)?;
            (h, c) = lstm_step(g, cell, xt, h, c)?;
        }
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional LSTM over `x: [n, d]`; returns `[n, 2 * hidden]` whose
/// row `i` is the forward state at `i` followed by the backward state at `i`.
pub fn bilstm_forward(g: &mut Graph, fwd: &LstmCell, bwd: &LstmCell, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 2 || xs[0] == 0 {
        return Err(Error::invalid(format!("bilstm needs a non-empty [n, d] input, got {xs:?}")));
    }
    if xs[0] != mask.len() {
        return Err(Error::shape("bilstm", &xs, &[mask.len()]));
    }
    let n = xs[0];
    let forward = lstm_scan(g, fwd, x, mask, 0..n)?;
    let backward = lstm_scan(g, bwd, x, mask, (0..n).rev())?;
    let rows = forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    g.stack_rows(&rows)
}

/// `f(V)`: tanh projection, scoring against a learned context vector,
/// softmax over positions, weighted sum of the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveAttention {
    pub w: ParamId,
    pub b: ParamId,
    pub context: ParamId,
    pub input_dim: usize,
    pub context_dim: usize,
}

impl AdditiveAttention {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        input_dim: usize,
        context_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(group, format!("{name}.w"), glorot_uniform(context_dim, input_dim, rng));
        let b = store.add(group, format!("{name}.b"), Tensor::zeros(&[context_dim]));
        let u = glorot_uniform(1, context_dim, rng).into_data();
        let context = store.add(group, format!("{name}.context"), Tensor::vector(u));
        Self {
            w,
            b,
            context,
            input_dim,
            context_dim,
        }
    }

    pub fn scalars(&self) -> usize {
        self.context_dim * (self.input_dim + 2)
    }
}

fn check_mask(op: &'static str, g: &Graph, v: NodeId, mask: &[bool]) -> Result<usize> {
    let shape = g.value(v).shape();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::shape(op, shape, &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid(format!("{op}: every position is masked")));
    }
    Ok(shape[1])
}

/// Returns `(pooled vector [d], weights [n])`.
pub fn additive_attention(g: &mut Graph, att: &AdditiveAttention, v: NodeId, mask: &[bool]) -> Result<(NodeId, NodeId)> {
    let d = check_mask("additive_attention", g, v, mask)?;
    if d != att.input_dim {
        return Err(Error::shape("additive_attention", &[att.context_dim, att.input_dim], g.value(v).shape()));
    }
    let w = g.param(att.w);
    let b = g.param(att.b);
    let u_w = g.param(att.context);
    let proj = g.matmul_nt(v, w)?;
    let proj = g.add_row(proj, b)?;
    let u = g.tanh(proj)?;
    let scores = g.matvec(u, u_w)?;
    let alpha = g.masked_softmax(scores, mask)?;
    let pooled = g.vecmat(alpha, v)?;
    Ok((pooled, alpha))
}

/// Parameter-free dot-product attention of `query` over the rows of `x`.
/// Returns `(pooled vector, weights)`.
pub fn dot_attention(g: &mut Graph, x: NodeId, query: NodeId, mask: &[bool]) -> Result<(NodeId, NodeId)> {
    let d = check_mask("dot_attention", g, x, mask)?;
    if g.value(query).shape() != [d] {
        return Err(Error::shape("dot_attention", g.value(x).shape(), g.value(query).shape()));
    }
    let scores = g.matvec(x, query)?;
    let beta = g.masked_softmax(scores, mask)?;
    let pooled = g.vecmat(beta, x)?;
    Ok((pooled, beta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` so evaluation
/// is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId, mode: Mode, rng: &mut impl Rng) -> Result<NodeId> {
        if mode == Mode::Eval || self.p == 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - self.p);
        let numel: usize = shape.iter().product();
        let mask = (0..numel)
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}
