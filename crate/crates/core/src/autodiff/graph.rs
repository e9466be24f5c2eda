//! Computation record for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the nodes in reverse and accumulates adjoints into parameters.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Lower and upper clip applied to probabilities before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Gradient of a scalar loss with respect to each named parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    /// Element-wise sum with another gradient set, in key order.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

struct LstmCache {
    batch: usize,
    steps: usize,
    pixels: usize,
    filters: usize,
    x_geom: ConvGeom,
    h_geom: ConvGeom,
    /// Post-activation gates `[T][B][HW][i f g o]`.
    gates: Vec<f64>,
    /// Cell states `[T][B][HW][F]`.
    cells: Vec<f64>,
    /// Hidden states `[T][B][HW][F]`.
    hidden: Vec<f64>,
}

enum Op {
    Input,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    SelectTime {
        x: Var,
        t: usize,
    },
    StackTime {
        parts: Vec<Var>,
    },
    ConvLstm {
        x: Var,
        w: Var,
        u: Var,
        b: Var,
        cache: Box<LstmCache>,
    },
    Bce {
        p: Var,
        target: Tensor,
    },
    Mse {
        p: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Param(name.into()), &[])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("shapes checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::Affine { x, scale }, &[x])
    }

    /// Adds `bias` (length = last axis of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = self.value(x).last_dim();
        if self.value(bias).len() != width {
            return Err(Error::shape(format!(
                "bias of {} for last axis {width}",
                self.value(bias).len()
            )));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(width) {
            for (e, bb) in row.iter_mut().zip(&b) {
                *e += bb;
            }
        }
        Ok(self.push(v, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// `x [B, I] * w [I, O] (+ b [O])`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!("dense: input {xs:?} with weight {ws:?}")));
        }
        let (rows, inner, outer) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.value(b).len() != outer {
                return Err(Error::shape(format!("dense bias length {}", self.value(b).len())));
            }
        }
        let mut out = vec![0.0; rows * outer];
        kernels::gemm(
            rows,
            inner,
            outer,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(outer) {
                for (e, bb) in row.iter_mut().zip(bias) {
                    *e += bb;
                }
            }
        }
        let v = Tensor::new(&[rows, outer], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Dense { x, w, b }, &parents))
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if geom.k.is_multiple_of(2) {
            return Err(Error::shape(format!("kernel size {} must be odd", geom.k)));
        }
        if self.value(w).len() != geom.weight_len() {
            return Err(Error::shape(format!(
                "kernel {:?} does not match {} -> {} channels",
                self.shape(w),
                geom.cin,
                geom.cout
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != geom.cout {
                return Err(Error::shape(format!("conv bias length {}", self.value(b).len())));
            }
        }
        let data = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(&out_shape, data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Conv { x, w, b, geom }, &parents))
    }

    /// Same-padded, stride-1 2-D cross-correlation.
    /// `x [B, H, W, C]`, `w [k, k, C, F]`, `b [F]` → `[B, H, W, F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
            return Err(Error::shape(format!("conv2d: input {xs:?} with kernel {ws:?}")));
        }
        let geom = ConvGeom {
            items: xs[0],
            t: 1,
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            cout: ws[3],
            kt: 1,
            k: ws[0],
        };
        self.conv(x, w, b, geom, vec![xs[0], xs[1], xs[2], ws[3]])
    }

    /// 3-D cross-correlation, same-padded in space and causal in time, so the
    /// output keeps the input's length and step `t` only sees steps `<= t`.
    /// `x [B, T, H, W, C]`, `w [kt, k, k, C, F]` → `[B, T, H, W, F]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[1] != ws[2] || ws[3] != xs[4] {
            return Err(Error::shape(format!("conv3d: input {xs:?} with kernel {ws:?}")));
        }
        let geom = ConvGeom {
            items: xs[0],
            t: xs[1],
            h: xs[2],
            w: xs[3],
            cin: xs[4],
            cout: ws[4],
            kt: ws[0],
            k: ws[1],
        };
        self.conv(x, w, b, geom, vec![xs[0], xs[1], xs[2], xs[3], ws[4]])
    }

    /// Per-channel normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.len().checked_div(c).unwrap_or(0);
        if rows == 0 {
            return Err(Error::invalid("batch normalization over an empty batch"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(format!("batch norm affine params for {c} channels")));
        }
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(format!("running stats for {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ch in 0..c {
                row[ch] = g[ch] * (row[ch] - mean[ch]) * inv_std[ch] + bt[ch];
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var,
        });
        let node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((node, stats))
    }

    /// Element-wise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask length differs from input"));
        }
        let mut v = self.value(x).clone();
        for (e, m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        Ok(self.push(v, Op::Mask { x, mask }, &[x]))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", s, self.shape(first))));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("slice of a scalar"))?;
        if start + len > width || len == 0 {
            return Err(Error::shape(format!("slice {start}+{len} of width {width}")));
        }
        let data = self
            .value(x)
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Slice { x, start, len }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `x [B, T, ...]` → `x[:, t] [B, ...]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || t >= s[1] {
            return Err(Error::shape(format!("select step {t} of {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(s[1] * inner)
            .flat_map(|item| item[t * inner..(t + 1) * inner].iter().copied())
            .collect();
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&s[2..]);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::SelectTime { x, t }, &[x]))
    }

    /// Stacks `[B, ...]` steps into `[B, T, ...]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("stack of zero steps"))?;
        let s = self.shape(first).to_vec();
        if s.is_empty() || parts.iter().any(|p| self.shape(*p) != s.as_slice()) {
            return Err(Error::shape("stack_time needs equally shaped [B, ...] steps"));
        }
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(s[0] * parts.len() * inner);
        for b in 0..s[0] {
            for p in parts {
                data.extend_from_slice(&self.value(*p).data()[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![s[0], parts.len()];
        shape.extend_from_slice(&s[1..]);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::StackTime { parts: parts.to_vec() }, parts))
    }

    /// Whole-sequence convolutional LSTM with zero initial state, returning
    /// every hidden state.
    ///
    /// `x [B, T, H, W, C]`, input kernel `w [k, k, C, 4F]`, recurrent kernel
    /// `u [k, k, F, 4F]`, bias `b [4F]`; gate blocks are ordered
    /// input, forget, candidate, output. Output `[B, T, H, W, F]`.
    pub fn conv_lstm(&mut self, x: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (ws, us) = (self.shape(w).to_vec(), self.shape(u).to_vec());
        if xs.len() != 5 || ws.len() != 4 || us.len() != 4 {
            return Err(Error::shape(format!(
                "conv_lstm: input {xs:?}, kernels {ws:?} / {us:?}"
            )));
        }
        let (batch, steps, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let k = ws[0];
        let filters = us[2];
        let g4 = 4 * filters;
        if ws != [k, k, cin, g4] || us != [k, k, filters, g4] || k % 2 == 0 {
            return Err(Error::shape(format!(
                "conv_lstm kernels {ws:?} / {us:?} do not match {cin} inputs"
            )));
        }
        if self.value(b).len() != g4 {
            return Err(Error::shape(format!("conv_lstm bias length {}", self.value(b).len())));
        }
        let pixels = h * wd;
        let x_geom = ConvGeom {
            items: batch * steps,
            t: 1,
            h,
            w: wd,
            cin,
            cout: g4,
            kt: 1,
            k,
        };
        let h_geom = ConvGeom {
            items: batch,
            cin: filters,
            ..x_geom
        };

        let xz = kernels::conv_forward(
            &x_geom,
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
        );
        let step_z = batch * pixels * g4;
        let step_h = batch * pixels * filters;
        let mut gates = vec![0.0; steps * step_z];
        let mut cells = vec![0.0; steps * step_h];
        let mut hidden = vec![0.0; steps * step_h];
        let item_z = pixels * g4;
        for t in 0..steps {
            let mut z = vec![0.0; step_z];
            for bi in 0..batch {
                let src = (bi * steps + t) * item_z;
                z[bi * item_z..(bi + 1) * item_z].copy_from_slice(&xz[src..src + item_z]);
            }
            if t > 0 {
                let hz = kernels::conv_forward(
                    &h_geom,
                    &hidden[(t - 1) * step_h..t * step_h],
                    self.value(u).data(),
                    None,
                );
                z.iter_mut().zip(&hz).for_each(|(a, b)| *a += b);
            }
            for cell in 0..batch * pixels {
                let zc = &z[cell * g4..(cell + 1) * g4];
                let gc = &mut gates[t * step_z + cell * g4..t * step_z + (cell + 1) * g4];
                for ch in 0..filters {
                    let i = sigmoid(zc[ch]);
                    let f = sigmoid(zc[filters + ch]);
                    let g = zc[2 * filters + ch].tanh();
                    let o = sigmoid(zc[3 * filters + ch]);
                    gc[ch] = i;
                    gc[filters + ch] = f;
                    gc[2 * filters + ch] = g;
                    gc[3 * filters + ch] = o;
                    let prev = if t > 0 {
                        cells[(t - 1) * step_h + cell * filters + ch]
                    } else {
                        0.0
                    };
                    let c = f * prev + i * g;
                    cells[t * step_h + cell * filters + ch] = c;
                    hidden[t * step_h + cell * filters + ch] = o * c.tanh();
                }
            }
        }

        let item_h = pixels * filters;
        let mut out = vec![0.0; batch * steps * item_h];
        for t in 0..steps {
            for bi in 0..batch {
                let dst = (bi * steps + t) * item_h;
                let src = t * step_h + bi * item_h;
                out[dst..dst + item_h].copy_from_slice(&hidden[src..src + item_h]);
            }
        }
        let v = Tensor::new(&[batch, steps, h, wd, filters], out)?;
        let cache = Box::new(LstmCache {
            batch,
            steps,
            pixels,
            filters,
            x_geom,
            h_geom,
            gates,
            cells,
            hidden,
        });
        Ok(self.push(v, Op::ConvLstm { x, w, u, b, cache }, &[x, w, u, b]))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
    pub fn bce(&mut self, p: Var, target: Tensor) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape(format!(
                "bce: prediction {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            )));
        }
        let n = target.len() as f64;
        let total: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum();
        let v = Tensor::scalar(-total / n);
        Ok(self.push(v, Op::Bce { p, target }, &[p]))
    }

    /// Mean squared error.
    pub fn mse(&mut self, p: Var, target: Tensor) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape(format!(
                "mse: prediction {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            )));
        }
        let n = target.len() as f64;
        let total: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, y)| (p - y) * (p - y))
            .sum();
        let v = Tensor::scalar(total / n);
        Ok(self.push(v, Op::Mse { p, target }, &[p]))
    }

    /// Reverse-mode sweep from a scalar `loss`; returns one gradient per
    /// parameter leaf (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(name) = &node.op {
                let t = Tensor::new(node.value.shape(), g)?;
                match out.0.get_mut(name) {
                    Some(acc) => acc.add_assign(&t)?,
                    None => {
                        out.0.insert(name.clone(), t);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                out.0
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, g.to_vec());
                if self.wants(*bias) {
                    let width = self.value(*bias).len();
                    self.acc(grads, *bias, kernels::column_sums(g, width));
                }
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Sum(x) => {
                self.acc(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (rows, inner, outer) = (xs[0], xs[1], ws[1]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * inner];
                    kernels::gemm(rows, outer, inner, g, false, self.value(*w).data(), true, 0.0, &mut dx);
                    self.acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; inner * outer];
                    kernels::gemm(inner, rows, outer, self.value(*x).data(), true, g, false, 0.0, &mut dw);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, kernels::column_sums(g, outer));
                }
            }
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    let dx = kernels::conv_grad_input(geom, g, self.value(*w).data());
                    self.acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = kernels::conv_grad_weight(geom, self.value(*x).data(), g);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, kernels::column_sums(g, geom.cout));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xv = self.value(*x).data();
                let c = mean.len();
                let rows = xv.len() / c;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (row, grow) in xv.chunks(c).zip(g.chunks(c)) {
                    for ch in 0..c {
                        let xhat = (row[ch] - mean[ch]) * inv_std[ch];
                        dgamma[ch] += grow[ch] * xhat;
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    if *train {
                        // dx = gamma * inv_std / N * (N dy - sum dy - xhat sum(dy xhat))
                        let n = rows as f64;
                        for ((drow, row), grow) in dx.chunks_mut(c).zip(xv.chunks(c)).zip(g.chunks(c)) {
                            for ch in 0..c {
                                let xhat = (row[ch] - mean[ch]) * inv_std[ch];
                                drow[ch] = gm[ch] * inv_std[ch] / n * (n * grow[ch] - dbeta[ch] - xhat * dgamma[ch]);
                            }
                        }
                    } else {
                        for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(c)) {
                            for ch in 0..c {
                                drow[ch] = grow[ch] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Mask { x, mask } => {
                self.acc(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let width = self.value(*x).last_dim();
                let mut d = vec![0.0; self.value(*x).len()];
                for (drow, grow) in d.chunks_mut(width).zip(g.chunks(*len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::SelectTime { x, t } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let mut d = vec![0.0; self.value(*x).len()];
                for (b, grow) in g.chunks(inner).enumerate() {
                    let off = (b * s[1] + t) * inner;
                    d[off..off + inner].copy_from_slice(grow);
                }
                self.acc(grads, *x, d);
            }
            Op::StackTime { parts } => {
                let s = self.shape(parts[0]);
                let inner: usize = s[1..].iter().product();
                let steps = parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(s[0] * inner);
                        for b in 0..s[0] {
                            let off = (b * steps + t) * inner;
                            d.extend_from_slice(&g[off..off + inner]);
                        }
                        self.acc(grads, p, d);
                    }
                }
            }
            Op::ConvLstm { x, w, u, b, cache } => self.conv_lstm_backward(*x, *w, *u, *b, cache, g, grads),
            Op::Bce { p, target } => {
                let n = target.len() as f64;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                            0.0
                        } else {
                            -g[0] / n * (y / p - (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                self.acc(grads, *p, d);
            }
            Op::Mse { p, target } => {
                let n = target.len() as f64;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, y)| g[0] * 2.0 * (p - y) / n)
                    .collect();
                self.acc(grads, *p, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_lstm_backward(
        &self,
        x: Var,
        w: Var,
        u: Var,
        b: Var,
        cache: &LstmCache,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let LstmCache {
            batch,
            steps,
            pixels,
            filters,
            ref x_geom,
            ref h_geom,
            ref gates,
            ref cells,
            ref hidden,
        } = *cache;
        let g4 = 4 * filters;
        let item_h = pixels * filters;
        let item_z = pixels * g4;
        let step_h = batch * item_h;
        let step_z = batch * item_z;
        let u_data = self.value(u).data();

        let mut dxz = vec![0.0; batch * steps * item_z];
        let mut du = vec![0.0; u_data.len()];
        let mut dh_rec = vec![0.0; step_h];
        let mut dc_next = vec![0.0; step_h];
        for t in (0..steps).rev() {
            let mut dz = vec![0.0; step_z];
            for bi in 0..batch {
                for p in 0..pixels {
                    let cell = bi * pixels + p;
                    let gz = &gates[t * step_z + cell * g4..t * step_z + (cell + 1) * g4];
                    let dzc = &mut dz[cell * g4..(cell + 1) * g4];
                    for ch in 0..filters {
                        let hidx = cell * filters + ch;
                        let dh = g[(bi * steps + t) * item_h + p * filters + ch] + dh_rec[hidx];
                        let c = cells[t * step_h + hidx];
                        let prev = if t > 0 { cells[(t - 1) * step_h + hidx] } else { 0.0 };
                        let (i, f, gg, o) = (gz[ch], gz[filters + ch], gz[2 * filters + ch], gz[3 * filters + ch]);
                        let tc = c.tanh();
                        let d_o = dh * tc;
                        let dc = dc_next[hidx] + dh * o * (1.0 - tc * tc);
                        dc_next[hidx] = dc * f;
                        dzc[ch] = dc * gg * i * (1.0 - i);
                        dzc[filters + ch] = dc * prev * f * (1.0 - f);
                        dzc[2 * filters + ch] = dc * i * (1.0 - gg * gg);
                        dzc[3 * filters + ch] = d_o * o * (1.0 - o);
                    }
                }
            }
            for bi in 0..batch {
                let dst = (bi * steps + t) * item_z;
                dxz[dst..dst + item_z].copy_from_slice(&dz[bi * item_z..(bi + 1) * item_z]);
            }
            if t > 0 {
                let prev_h = &hidden[(t - 1) * step_h..t * step_h];
                let part = kernels::conv_grad_weight(h_geom, prev_h, &dz);
                du.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                dh_rec = kernels::conv_grad_input(h_geom, &dz, u_data);
            }
        }

        if self.wants(x) {
            let dx = kernels::conv_grad_input(x_geom, &dxz, self.value(w).data());
            self.acc(grads, x, dx);
        }
        if self.wants(w) {
            let dw = kernels::conv_grad_weight(x_geom, self.value(x).data(), &dxz);
            self.acc(grads, w, dw);
        }
        self.acc(grads, u, du);
        self.acc(grads, b, kernels::column_sums(&dxz, g4));
    }
}
