//! Plain-loop reference implementations used as test oracles. Nothing here
//! touches the graph; parameters are read straight out of the store.

#![allow(dead_code)]

use acsa_core::autodiff::{ParamId, ParamStore};
use acsa_core::data::Example;
use acsa_core::model::{JointModel, ModelConfig, ModelVariant};
use acsa_core::nn::{AdditiveAttention, Dense, LstmCell};

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn vals(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

/// `W x` for a row-major `[rows, cols]` matrix.
pub fn mv(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

pub fn softmax_ref(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn weighted_sum(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for (w, r) in weights.iter().zip(rows) {
        for k in 0..d {
            out[k] += w * r[k];
        }
    }
    out
}

pub fn lstm_step_ref(store: &ParamStore, cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = cell.hidden;
    let a = mv(&vals(store, cell.w_ih), 4 * d, cell.input_dim, x);
    let b = mv(&vals(store, cell.w_hh), 4 * d, d, h);
    let bias = vals(store, cell.bias);
    let z: Vec<f64> = (0..4 * d).map(|k| a[k] + b[k] + bias[k]).collect();
    let mut h_new = vec![0.0; d];
    let mut c_new = vec![0.0; d];
    for k in 0..d {
        let i = sig(z[k]);
        let f = sig(z[d + k]);
        let gg = z[2 * d + k].tanh();
        let o = sig(z[3 * d + k]);
        c_new[k] = f * c[k] + i * gg;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

/// Rows `[forward_i, backward_i]`; masked positions repeat the last state.
pub fn bilstm_ref(store: &ParamStore, fwd: &LstmCell, bwd: &LstmCell, xs: &[Vec<f64>], mask: &[bool]) -> Vec<Vec<f64>> {
    let n = xs.len();
    let scan = |cell: &LstmCell, order: Vec<usize>| {
        let mut h = vec![0.0; cell.hidden];
        let mut c = vec![0.0; cell.hidden];
        let mut out = vec![Vec::new(); n];
        for t in order {
            if mask[t] {
                (h, c) = lstm_step_ref(store, cell, &xs[t], &h, &c);
            }
            out[t] = h.clone();
        }
        out
    };
    let f = scan(fwd, (0..n).collect());
    let b = scan(bwd, (0..n).rev().collect());
    f.into_iter().zip(b).map(|(mut a, b)| {
        a.extend(b);
        a
    }).collect()
}

pub fn additive_ref(store: &ParamStore, att: &AdditiveAttention, rows: &[Vec<f64>], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let w = vals(store, att.w);
    let b = vals(store, att.b);
    let u = vals(store, att.context);
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| {
            let p = mv(&w, att.context_dim, att.input_dim, r);
            (0..att.context_dim).map(|k| (p[k] + b[k]).tanh() * u[k]).sum()
        })
        .collect();
    let alpha = softmax_ref(&scores, mask);
    (weighted_sum(&alpha, rows), alpha)
}

pub fn dot_ref(rows: &[Vec<f64>], q: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = rows.iter().map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum()).collect();
    let beta = softmax_ref(&scores, mask);
    (weighted_sum(&beta, rows), beta)
}

pub fn dense_relu_ref(store: &ParamStore, l: &Dense, x: &[f64]) -> Vec<f64> {
    let z = mv(&vals(store, l.weight), l.output_dim, l.input_dim, x);
    let b = vals(store, l.bias);
    z.iter().zip(&b).map(|(z, b)| (z + b).max(0.0)).collect()
}

pub fn dense_linear_ref(store: &ParamStore, l: &Dense, x: &[f64]) -> Vec<f64> {
    let z = mv(&vals(store, l.weight), l.output_dim, l.input_dim, x);
    let b = vals(store, l.bias);
    z.iter().zip(&b).map(|(z, b)| z + b).collect()
}

pub struct RefOutput {
    pub y_a: Vec<f64>,
    pub y_s: Vec<Vec<f64>>,
    pub alpha_x: Vec<Vec<f64>>,
    pub alpha_h: Vec<Vec<f64>>,
    pub beta_x: Vec<Vec<f64>>,
    pub beta_h: Vec<Vec<f64>>,
}

/// Whole-model evaluation-mode forward pass composed from the layer oracles.
pub fn forward_ref(model: &JointModel, ids: &[usize], mask: &[bool]) -> RefOutput {
    let s = model.store();
    let table = s.value(model.embedding.table);
    let xs: Vec<Vec<f64>> = ids.iter().map(|&i| table.row(i).to_vec()).collect();
    let hs = bilstm_ref(s, &model.lstm_fwd, &model.lstm_bwd, &xs, mask);
    let mut out = RefOutput {
        y_a: vec![],
        y_s: vec![],
        alpha_x: vec![],
        alpha_h: vec![],
        beta_x: vec![],
        beta_h: vec![],
    };
    for (j, a) in model.aspects.iter().enumerate() {
        let (vx, ax) = additive_ref(s, &a.attn_x, &xs, mask);
        let (vh, ah) = additive_ref(s, &a.attn_h, &hs, mask);
        let cat: Vec<f64> = vx.iter().chain(&vh).copied().collect();
        let hid = dense_relu_ref(s, &a.acd_hidden, &cat);
        out.y_a.push(sig(dense_linear_ref(s, &a.acd_out, &hid)[0]));

        let (qx, qh) = match &model.queries {
            Some(q) => (vals(s, q[j].x), vals(s, q[j].h)),
            None => (vx, vh),
        };
        let (sx, bx) = dot_ref(&xs, &qx, mask);
        let (sh, bh) = dot_ref(&hs, &qh, mask);
        let v: Vec<f64> = sx.iter().chain(&sh).copied().collect();
        let head = if model.sc_heads.len() == 1 { &model.sc_heads[0] } else { &model.sc_heads[j] };
        let hid = dense_relu_ref(s, &head.hidden, &v);
        let logits = dense_linear_ref(s, &head.out, &hid);
        out.y_s.push(softmax_ref(&logits, &vec![true; logits.len()]));
        out.alpha_x.push(ax);
        out.alpha_h.push(ah);
        out.beta_x.push(bx);
        out.beta_h.push(bh);
    }
    out
}

pub fn small_config(vocab: usize, n: usize, m: usize, variant: ModelVariant) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab, n, m);
    cfg.embed_dim = 6;
    cfg.lstm_hidden = 4;
    cfg.head_hidden = 5;
    cfg.variant = variant;
    cfg
}

pub fn example(ids: Vec<usize>, y_a: Vec<u8>, y_s: Vec<Vec<u8>>) -> Example {
    Example {
        id: "t".into(),
        mask: vec![true; ids.len()],
        token_ids: ids,
        y_a,
        y_s,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
