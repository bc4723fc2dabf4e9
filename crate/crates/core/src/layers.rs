//! Recurrent and Transformer building blocks shared by the models.
//!
//! Parameters live in a [`ParamStore`] under dotted names rooted at a
//! caller-chosen prefix, e.g. `lstm.fw.w_ih`.

use crate::error::Result;
use crate::numeric::{ones_param, xavier_uniform, zeros_param, BoundParams, ParamStore, Rng, Tape, Var};

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

pub(crate) fn init_linear(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, output: usize) {
    store.insert(key(prefix, "w"), xavier_uniform(rng, input, output));
    store.insert(key(prefix, "b"), zeros_param(&[output]));
}

pub(crate) fn linear(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&key(prefix, "w"))?;
    let b = p.get(&key(prefix, "b"))?;
    tape.linear(x, w, b)
}

// Gate layout along the last axis: input, forget, cell, output.
pub(crate) fn init_lstm(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) {
    store.insert(key(prefix, "w_ih"), xavier_uniform(rng, input, 4 * hidden));
    store.insert(key(prefix, "w_hh"), xavier_uniform(rng, hidden, 4 * hidden));
    store.insert(key(prefix, "b"), zeros_param(&[4 * hidden]));
}

/// Runs one LSTM direction over the rows of `x`; returns `[n, hidden]` in
/// position order regardless of direction.
pub(crate) fn lstm(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    hidden: usize,
    reverse: bool,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let w_ih = p.get(&key(prefix, "w_ih"))?;
    let w_hh = p.get(&key(prefix, "w_hh"))?;
    let b = p.get(&key(prefix, "b"))?;
    let xw = tape.linear(x, w_ih, b)?;
    let mut h = tape.constant(&[1, hidden], vec![0.0; hidden])?;
    let mut c = h;
    let mut outputs = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let xt = tape.row(xw, t)?;
        let hw = tape.matmul(h, w_hh)?;
        let gates = tape.add(xt, hw)?;
        let i_pre = tape.narrow(gates, 1, 0, hidden)?;
        let f_pre = tape.narrow(gates, 1, hidden, hidden)?;
        let g_pre = tape.narrow(gates, 1, 2 * hidden, hidden)?;
        let o_pre = tape.narrow(gates, 1, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        outputs[t] = h;
    }
    tape.concat(&outputs, 0)
}

pub(crate) fn init_bilstm(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) {
    init_lstm(store, rng, &key(prefix, "fw"), input, hidden);
    init_lstm(store, rng, &key(prefix, "bw"), input, hidden);
}

/// Forward and backward states concatenated per position: `[n, 2 * hidden]`.
pub(crate) fn bilstm(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, hidden: usize) -> Result<Var> {
    let fw = lstm(tape, p, &key(prefix, "fw"), x, hidden, false)?;
    let bw = lstm(tape, p, &key(prefix, "bw"), x, hidden, true)?;
    tape.concat(&[fw, bw], 1)
}

// Gate layout: reset, update, candidate.
pub(crate) fn init_gru(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) {
    store.insert(key(prefix, "w_ih"), xavier_uniform(rng, input, 3 * hidden));
    store.insert(key(prefix, "w_hh"), xavier_uniform(rng, hidden, 3 * hidden));
    store.insert(key(prefix, "b_ih"), zeros_param(&[3 * hidden]));
    store.insert(key(prefix, "b_hh"), zeros_param(&[3 * hidden]));
}

/// Input projection `x · W_ih + b_ih` for every row of `x`.
pub(crate) fn gru_input(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&key(prefix, "w_ih"))?;
    let b = p.get(&key(prefix, "b_ih"))?;
    tape.linear(x, w, b)
}

/// One GRU update from a precomputed `[1, 3H]` input projection.
pub(crate) fn gru_cell(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x_proj: Var,
    h: Var,
    hidden: usize,
) -> Result<Var> {
    let w_hh = p.get(&key(prefix, "w_hh"))?;
    let b_hh = p.get(&key(prefix, "b_hh"))?;
    let h_proj = tape.linear(h, w_hh, b_hh)?;
    let part = |tape: &mut Tape, v: Var, k: usize| tape.narrow(v, 1, k * hidden, hidden);
    let (xr, xz, xn) = (part(tape, x_proj, 0)?, part(tape, x_proj, 1)?, part(tape, x_proj, 2)?);
    let (hr, hz, hn) = (part(tape, h_proj, 0)?, part(tape, h_proj, 1)?, part(tape, h_proj, 2)?);
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre);
    let rh = tape.mul(r, hn)?;
    let n_pre = tape.add(xn, rh)?;
    let n = tape.tanh(n_pre);
    // h' = (1 - z) n + z h = n + z (h - n)
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

pub(crate) fn init_encoder_layer(store: &mut ParamStore, rng: &mut Rng, prefix: &str, width: usize, ff: usize) {
    for proj in ["q", "v", "o"] {
        init_linear(store, rng, &key(prefix, proj), width, width);
    }
    // A key bias shifts every score of a query row equally and cancels in
    // the softmax, so keys are projected without one.
    store.insert(key(prefix, "k.w"), xavier_uniform(rng, width, width));
    init_linear(store, rng, &key(prefix, "ff1"), width, ff);
    init_linear(store, rng, &key(prefix, "ff2"), ff, width);
    for ln in ["ln1", "ln2"] {
        store.insert(key(prefix, &format!("{ln}.gamma")), ones_param(&[width]));
        store.insert(key(prefix, &format!("{ln}.beta")), zeros_param(&[width]));
    }
}

const LN_EPS: f64 = 1e-5;

/// Post-norm Transformer encoder layer over `[n, width]`, no masking.
pub(crate) fn encoder_layer(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let width = tape.shape(x)[1];
    let head_dim = width / heads;
    let q = linear(tape, p, &key(prefix, "q"), x)?;
    let k_w = p.get(&key(prefix, "k.w"))?;
    let k = tape.matmul(x, k_w)?;
    let v = linear(tape, p, &key(prefix, "v"), x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * head_dim, head_dim)?;
        let kh = tape.narrow(k, 1, h * head_dim, head_dim)?;
        let vh = tape.narrow(v, 1, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale);
        let weights = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat(&outs, 1)?;
    let attn = linear(tape, p, &key(prefix, "o"), merged)?;
    let res1 = tape.add(x, attn)?;
    let x1 = layer_norm(tape, p, &key(prefix, "ln1"), res1)?;
    let hidden = linear(tape, p, &key(prefix, "ff1"), x1)?;
    let act = tape.relu(hidden);
    let ff = linear(tape, p, &key(prefix, "ff2"), act)?;
    let res2 = tape.add(x1, ff)?;
    layer_norm(tape, p, &key(prefix, "ln2"), res2)
}

fn layer_norm(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&key(prefix, "gamma"))?;
    let b = p.get(&key(prefix, "beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}
