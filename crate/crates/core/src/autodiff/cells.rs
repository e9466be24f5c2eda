//! Single-step recurrent cells composed from graph primitives.
//!
//! Gate blocks are laid out along the last axis of the kernels in the order
//! input, forget, candidate, output (LSTM) and update, reset, candidate (GRU).

use super::graph::{Graph, Var};
use crate::{Error, Result};

fn width(g: &Graph, v: Var) -> usize {
    g.value(v).last_dim()
}

fn gate_split(g: &mut Graph, z: Var, units: usize, n: usize) -> Result<Vec<Var>> {
    if width(g, z) != units * n {
        return Err(Error::shape(format!(
            "expected {n} gate blocks of {units}, got width {}",
            width(g, z)
        )));
    }
    (0..n).map(|i| g.slice_last(z, i * units, units)).collect()
}

fn lstm_update(g: &mut Graph, z: Var, c: Option<Var>, units: usize) -> Result<(Var, Var)> {
    let gates = gate_split(g, z, units, 4)?;
    let i = g.sigmoid(gates[0]);
    let f = g.sigmoid(gates[1]);
    let cand = g.tanh(gates[2]);
    let o = g.sigmoid(gates[3]);
    let ic = g.mul(i, cand)?;
    let c_new = match c {
        Some(c) => {
            let fc = g.mul(f, c)?;
            g.add(fc, ic)?
        }
        None => ic,
    };
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// One convolutional LSTM step on `x [B, H, W, C]` with optional state
/// `h, c [B, H, W, F]` (absent means zero).
#[allow(clippy::too_many_arguments)]
pub fn conv_lstm_step(
    g: &mut Graph,
    x: Var,
    h: Option<Var>,
    c: Option<Var>,
    w: Var,
    u: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let units = g.shape(u).get(2).copied().unwrap_or(0);
    let mut z = g.conv2d(x, w, Some(b))?;
    if let Some(h) = h {
        let hz = g.conv2d(h, u, None)?;
        z = g.add(z, hz)?;
    }
    lstm_update(g, z, c, units)
}

/// Dense LSTM step: `x [B, I]`, kernels `w [I, 4U]`, `u [U, 4U]`, bias `[4U]`.
pub fn lstm_step(
    g: &mut Graph,
    x: Var,
    h: Option<Var>,
    c: Option<Var>,
    (w, u, b): (Var, Var, Var),
) -> Result<(Var, Var)> {
    let units = g.shape(u)[0];
    let mut z = g.dense(x, w, Some(b))?;
    if let Some(h) = h {
        let hz = g.dense(h, u, None)?;
        z = g.add(z, hz)?;
    }
    lstm_update(g, z, c, units)
}

/// Elman step `h' = tanh(x w + h u + b)`.
pub fn rnn_step(g: &mut Graph, x: Var, h: Option<Var>, (w, u, b): (Var, Var, Var)) -> Result<Var> {
    let mut z = g.dense(x, w, Some(b))?;
    if let Some(h) = h {
        let hz = g.dense(h, u, None)?;
        z = g.add(z, hz)?;
    }
    Ok(g.tanh(z))
}

/// GRU step with separate input and recurrent biases (reset applied after
/// the recurrent product): `b_in, b_rec [3U]`.
pub fn gru_step(g: &mut Graph, x: Var, h: Option<Var>, (w, u, b_in, b_rec): (Var, Var, Var, Var)) -> Result<Var> {
    let units = g.shape(u)[0];
    let xz = g.dense(x, w, Some(b_in))?;
    let xg = gate_split(g, xz, units, 3)?;
    let batch = g.shape(x)[0];
    let h = match h {
        Some(h) => h,
        None => g.input(super::Tensor::zeros(&[batch, units])),
    };
    let hz = g.dense(h, u, Some(b_rec))?;
    let hg = gate_split(g, hz, units, 3)?;
    let zs = g.add(xg[0], hg[0])?;
    let z = g.sigmoid(zs);
    let rs = g.add(xg[1], hg[1])?;
    let r = g.sigmoid(rs);
    let rh = g.mul(r, hg[2])?;
    let ns = g.add(xg[2], rh)?;
    let n = g.tanh(ns);
    // h' = z * h + (1 - z) * n
    let zh = g.mul(z, h)?;
    let one_minus = g.affine(z, -1.0, 1.0);
    let zn = g.mul(one_minus, n)?;
    g.add(zh, zn)
}
