//! Graph construction for each architecture family.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::arch::{Architecture, ComparatorKind};
use super::layers::{Activation, CellKind, LayerKind, LayerSpec};
use super::{Model, BN_EPS};
use crate::autodiff::{gru_step, lstm_step, rnn_step, BatchStats, BnMode, Bound, Graph, Tensor, Var};
use crate::{Error, Result};

pub enum Mode<'a> {
    Infer,
    /// Batch statistics for normalization and dropout masks drawn from the rng.
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct Forward {
    /// Next-step prediction, laid out sample-major.
    pub prediction: Var,
    /// Per-step outputs `[B, T, H, W, 1]` for sequence-trained models.
    pub sequence: Option<Var>,
    pub bn_stats: Vec<(String, BatchStats)>,
}

pub(crate) fn activate(g: &mut Graph, v: Var, a: Activation) -> Var {
    match a {
        Activation::Sigmoid => g.sigmoid(v),
        Activation::Tanh => g.tanh(v),
        Activation::Linear => v,
    }
}

fn param(b: &Bound, layer: &str, what: &str) -> Result<Var> {
    b.var(&format!("{layer}/{what}"))
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Encodes `windows` (each `T` steps of `step_width` values) as the model's
/// input tensor.
pub(crate) fn encode_input(arch: &Architecture, windows: &[&[Vec<f64>]]) -> Result<Tensor> {
    let b = windows.len();
    let t = arch.window();
    let w = arch.step_width();
    for win in windows {
        if win.len() != t {
            return Err(Error::shape(format!(
                "window of {} steps, model expects {t}",
                win.len()
            )));
        }
        if let Some(s) = win.iter().find(|s| s.len() != w) {
            return Err(Error::shape(format!("step of {} values, model expects {w}", s.len())));
        }
    }
    // [B, T, W]: the recurrent and 5-D conv layouts.
    let step_major = || -> Vec<f64> { windows.iter().flat_map(|win| win.iter().flatten().copied()).collect() };
    // [B, W, T]: per-pixel histories.
    let pixel_major = || -> Vec<f64> {
        let mut out = Vec::with_capacity(b * t * w);
        for win in windows {
            for p in 0..w {
                out.extend(win.iter().map(|s| s[p]));
            }
        }
        out
    };
    match arch {
        Architecture::Baseline(c) => Tensor::new(&[b, t, c.channels], step_major()),
        Architecture::Crnn(c) => Tensor::new(&[b, t, c.rows, c.cols, 1], step_major()),
        Architecture::Comparator(c) => match c.kind {
            ComparatorKind::Nn => Tensor::new(&[b * w, t], pixel_major()),
            ComparatorKind::Lstm => Tensor::new(&[b * w, t, 1], pixel_major()),
            ComparatorKind::Cnn => Tensor::new(&[b, c.rows, c.cols, t], pixel_major()),
            ComparatorKind::ConvLstm => Tensor::new(&[b, t, c.rows, c.cols, 1], step_major()),
        },
    }
}

impl Model {
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, mut mode: Mode<'_>) -> Result<Forward> {
        let layers = &self.layers;
        match &self.arch {
            Architecture::Baseline(_) => {
                let prediction = recurrent_stack(g, bound, x, layers, &mut mode)?;
                Ok(Forward {
                    prediction,
                    sequence: None,
                    bn_stats: Vec::new(),
                })
            }
            Architecture::Crnn(_) => self.crnn(g, bound, x, &mut mode),
            Architecture::Comparator(c) => {
                let prediction = match c.kind {
                    ComparatorKind::Lstm => recurrent_stack(g, bound, x, layers, &mut mode)?,
                    ComparatorKind::Nn => {
                        let mut h = x;
                        for l in layers {
                            let z = g.dense(
                                h,
                                param(bound, &l.name, "kernel")?,
                                Some(param(bound, &l.name, "bias")?),
                            )?;
                            h = activate(g, z, l.activation);
                        }
                        h
                    }
                    ComparatorKind::Cnn => {
                        let mut h = x;
                        for l in layers {
                            h = conv2d_layer(g, bound, h, l)?;
                        }
                        h
                    }
                    ComparatorKind::ConvLstm => {
                        let l = &layers[0];
                        let seq = g.conv_lstm(
                            x,
                            param(bound, &l.name, "kernel")?,
                            param(bound, &l.name, "recurrent")?,
                            param(bound, &l.name, "bias")?,
                        )?;
                        let last = g.shape(seq)[1] - 1;
                        let h = g.select_time(seq, last)?;
                        conv2d_layer(g, bound, h, &layers[1])?
                    }
                };
                Ok(Forward {
                    prediction,
                    sequence: None,
                    bn_stats: Vec::new(),
                })
            }
        }
    }

    fn crnn(&self, g: &mut Graph, bound: &Bound, x: Var, mode: &mut Mode<'_>) -> Result<Forward> {
        let s = g.shape(x).to_vec();
        let (b, t, rows, cols) = (s[0], s[1], s[2], s[3]);
        let mut h = x;
        let mut ch = s[4];
        let mut bn_stats = Vec::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv2d => {
                    let flat = g.reshape(h, &[b * t, rows, cols, ch])?;
                    let y = conv2d_layer(g, bound, flat, l)?;
                    h = g.reshape(y, &[b, t, rows, cols, l.filters])?;
                }
                LayerKind::ConvLstm2d => {
                    h = g.conv_lstm(
                        h,
                        param(bound, &l.name, "kernel")?,
                        param(bound, &l.name, "recurrent")?,
                        param(bound, &l.name, "bias")?,
                    )?;
                }
                LayerKind::BatchNorm => {
                    let (gamma, beta) = (param(bound, &l.name, "gamma")?, param(bound, &l.name, "beta")?);
                    let (y, stats) = if mode.is_train() {
                        g.batch_norm(h, gamma, beta, BN_EPS, BnMode::Train)?
                    } else {
                        let mean = self.state.get(&format!("{}/moving_mean", l.name))?.data();
                        let var = self.state.get(&format!("{}/moving_var", l.name))?.data();
                        g.batch_norm(h, gamma, beta, BN_EPS, BnMode::Infer { mean, var })?
                    };
                    if let Some(st) = stats {
                        bn_stats.push((l.name.clone(), st));
                    }
                    h = y;
                }
                LayerKind::Concat => {
                    let geo = self.state.get("geography")?.data();
                    let data = (0..b * t).flat_map(|_| geo.iter().copied()).collect();
                    let gv = g.input(Tensor::new(&[b, t, rows, cols, 1], data)?);
                    h = g.concat(&[h, gv])?;
                }
                LayerKind::Conv3d => {
                    let z = g.conv3d(
                        h,
                        param(bound, &l.name, "kernel")?,
                        Some(param(bound, &l.name, "bias")?),
                    )?;
                    h = activate(g, z, l.activation);
                }
                _ => return Err(Error::invalid(format!("unexpected crnn layer `{}`", l.name))),
            }
            ch = g.value(h).last_dim();
        }
        let prediction = g.select_time(h, t - 1)?;
        Ok(Forward {
            prediction,
            sequence: Some(h),
            bn_stats,
        })
    }
}

fn conv2d_layer(g: &mut Graph, bound: &Bound, x: Var, l: &LayerSpec) -> Result<Var> {
    let z = g.conv2d(
        x,
        param(bound, &l.name, "kernel")?,
        Some(param(bound, &l.name, "bias")?),
    )?;
    Ok(activate(g, z, l.activation))
}

/// Recurrent layers over `x [N, T, C]`, then the dense head on the final
/// hidden state; returns `[N, 1]`.
fn recurrent_stack(g: &mut Graph, bound: &Bound, x: Var, layers: &[LayerSpec], mode: &mut Mode<'_>) -> Result<Var> {
    let t = g.shape(x)[1];
    let mut steps: Vec<Var> = (0..t).map(|i| g.select_time(x, i)).collect::<Result<_>>()?;
    for l in layers {
        match l.kind {
            LayerKind::Recurrent(cell) => {
                let (w, u, b) = (
                    param(bound, &l.name, "kernel")?,
                    param(bound, &l.name, "recurrent")?,
                    param(bound, &l.name, "bias")?,
                );
                let mut h = None;
                let mut c = None;
                let mut out = Vec::with_capacity(steps.len());
                for &xt in &steps {
                    let hn = match cell {
                        CellKind::Rnn => rnn_step(g, xt, h, (w, u, b))?,
                        CellKind::Gru => gru_step(g, xt, h, (w, u, b, param(bound, &l.name, "bias_rec")?))?,
                        CellKind::Lstm => {
                            let (hn, cn) = lstm_step(g, xt, h, c, (w, u, b))?;
                            c = Some(cn);
                            hn
                        }
                    };
                    h = Some(hn);
                    out.push(hn);
                }
                steps = out;
            }
            LayerKind::Dropout => {
                if let Mode::Train(rng) = mode {
                    if l.dropout > 0.0 {
                        for s in steps.iter_mut() {
                            let n = g.value(*s).len();
                            *s = g.mask(*s, dropout_mask(rng, n, l.dropout))?;
                        }
                    }
                }
            }
            LayerKind::Dense => {
                let last = *steps.last().ok_or_else(|| Error::invalid("empty window"))?;
                let z = g.dense(
                    last,
                    param(bound, &l.name, "kernel")?,
                    Some(param(bound, &l.name, "bias")?),
                )?;
                return Ok(activate(g, z, l.activation));
            }
            _ => {
                return Err(Error::invalid(format!(
                    "unexpected layer `{}` in recurrent stack",
                    l.name
                )))
            }
        }
    }
    Err(Error::invalid("recurrent stack has no output head"))
}
