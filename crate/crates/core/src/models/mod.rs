//! Network assembly: recursive baselines, the CRNN and the comparison models.
//!
//! Every model consumes windows of `T` time steps, each a flat vector of
//! [`Architecture::step_width`] values (channel values for baselines, a
//! row-major `rows x cols` frame for the grid models), and predicts the next
//! step.

mod arch;
mod file;
mod forward;
mod layers;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use arch::{Architecture, BaselineConfig, ComparatorConfig, ComparatorKind, CrnnConfig, BASELINE_UNITS};
pub use forward::{Forward, Mode};
pub use layers::{glorot, Activation, CellKind, LayerKind, LayerSpec};

use crate::autodiff::{BatchStats, Bound, Graph, Params, Tensor, Var};
use crate::rasterize::HeatMapFrame;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;
/// Windows per graph during batched inference.
const PREDICT_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub theta_max: f64,
    pub seed: u64,
    /// RFC 3339 creation time; `None` for reproducible files.
    pub created: Option<String>,
    /// Free-form configuration echo.
    pub config: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub layers: Vec<LayerSpec>,
    pub params: Params,
    /// Non-trainable tensors: normalization running statistics and the
    /// geography map.
    pub state: Params,
    pub meta: ModelMeta,
}

impl Model {
    /// Builds and initializes `arch` from `seed`. Grid models that concatenate
    /// a geography map take it from `geography` (row-major, `rows x cols`),
    /// defaulting to all ones.
    pub fn build(arch: Architecture, seed: u64, geography: Option<&[f64]>) -> Result<Model> {
        arch.validate()?;
        let layers = arch.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut state = Params::new();
        for l in &layers {
            l.init(&mut rng, &mut params);
            match l.kind {
                LayerKind::BatchNorm => {
                    state.insert(format!("{}/moving_mean", l.name), Tensor::zeros(&[l.inputs]));
                    state.insert(format!("{}/moving_var", l.name), Tensor::ones(&[l.inputs]));
                }
                LayerKind::Concat => {
                    let (r, c) = arch.grid().ok_or_else(|| Error::invalid("concat layer needs a grid"))?;
                    let geo = match geography {
                        Some(g) if g.len() != r * c => {
                            return Err(Error::shape(format!(
                                "geography map has {} values, grid is {r}x{c}",
                                g.len()
                            )))
                        }
                        Some(g) => Tensor::new(&[r, c], g.to_vec())?,
                        None => Tensor::ones(&[r, c]),
                    };
                    state.insert("geography", geo);
                }
                _ => {}
            }
        }
        Ok(Model {
            arch,
            layers,
            params,
            state,
            meta: ModelMeta {
                theta_max: 1.0,
                seed,
                created: None,
                config: Vec::new(),
            },
        })
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    /// Layers carrying weights; normalization is not counted.
    pub fn trainable_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn window(&self) -> usize {
        self.arch.window()
    }

    fn uses_sigmoid(&self) -> bool {
        self.layers.last().map(|l| l.activation) == Some(Activation::Sigmoid)
    }

    /// Batched inference; returns one prediction vector per window, in order.
    pub fn predict(&self, windows: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
        for (i, w) in windows.iter().enumerate() {
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("window {i} contains a non-finite value")));
            }
        }
        let chunks: Vec<Vec<Vec<f64>>> = windows
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| -> Result<Vec<Vec<f64>>> {
                let mut g = Graph::new();
                let bound = self.params.bind(&mut g);
                let x = g.input(forward::encode_input(&self.arch, chunk)?);
                let out = self.forward(&mut g, &bound, x, Mode::Infer)?;
                Ok(g.value(out.prediction)
                    .data()
                    .chunks(self.arch.output_width())
                    .map(<[f64]>::to_vec)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let out: Vec<Vec<f64>> = chunks.into_iter().flatten().collect();
        if let Some(i) = out.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("prediction for window {i} is not finite")));
        }
        Ok(out)
    }

    /// Records the training loss for `samples`, each `T + 1` steps: the
    /// first `T` are the input and the following steps are targets. The CRNN
    /// is scored at every step against the frame that follows it; the other
    /// models on the final step only. Sigmoid outputs use binary
    /// cross-entropy, linear outputs squared error.
    pub fn loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        samples: &[&[Vec<f64>]],
        mode: Mode<'_>,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let t = self.window();
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(s) = samples.iter().find(|s| s.len() != t + 1) {
            return Err(Error::shape(format!("sample of {} steps, expected {}", s.len(), t + 1)));
        }
        let inputs: Vec<&[Vec<f64>]> = samples.iter().map(|s| &s[..t]).collect();
        let x = g.input(forward::encode_input(&self.arch, &inputs)?);
        let out = self.forward(g, bound, x, mode)?;
        let (pred, target) = match out.sequence {
            Some(seq) => {
                let data: Vec<f64> = samples.iter().flat_map(|s| s[1..].iter().flatten().copied()).collect();
                (seq, Tensor::new(g.shape(seq), data)?)
            }
            None => {
                let ow = self.arch.output_width();
                let data: Vec<f64> = samples.iter().flat_map(|s| s[t][..ow].iter().copied()).collect();
                (out.prediction, Tensor::new(g.shape(out.prediction), data)?)
            }
        };
        let loss = if self.uses_sigmoid() {
            g.bce(pred, target)?
        } else {
            g.mse(pred, target)?
        };
        Ok((loss, out.bn_stats))
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (layer, st) in stats {
            for (key, batch) in [("moving_mean", &st.mean), ("moving_var", &st.var)] {
                let t = self
                    .state
                    .get_mut(&format!("{layer}/{key}"))
                    .ok_or_else(|| Error::invalid(format!("no running statistics for `{layer}`")))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }
}

pub fn build_baseline(config: BaselineConfig, seed: u64) -> Result<Model> {
    Model::build(Architecture::Baseline(config), seed, None)
}

pub fn build_crnn(config: CrnnConfig, geography: Option<&[f64]>, seed: u64) -> Result<Model> {
    Model::build(Architecture::Crnn(config), seed, geography)
}

pub fn build_comparator(config: ComparatorConfig, seed: u64) -> Result<Model> {
    Model::build(Architecture::Comparator(config), seed, None)
}

/// One baseline prediction from `window` (`T` steps of `channels` values).
pub fn forward_baseline(model: &Model, window: &[Vec<f64>]) -> Result<f64> {
    if !matches!(model.arch, Architecture::Baseline(_)) {
        return Err(Error::invalid("forward_baseline needs a baseline model"));
    }
    Ok(model.predict(&[window])?[0][0])
}

/// Predicts the frame that follows `frames` (normalized, oldest first).
pub fn forward_crnn(model: &Model, frames: &[&HeatMapFrame]) -> Result<HeatMapFrame> {
    let Some((rows, cols)) = model.arch.grid() else {
        return Err(Error::invalid("forward_crnn needs a grid model"));
    };
    for f in frames {
        if f.rows != rows || f.cols != cols {
            return Err(Error::shape(format!(
                "frame {}x{} for a {rows}x{cols} model",
                f.rows, f.cols
            )));
        }
        if f.values.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::invalid("input frames must be normalized to [0, 1]"));
        }
    }
    let window: Vec<Vec<f64>> = frames.iter().map(|f| f.values.clone()).collect();
    let pred = model.predict(&[&window])?.remove(0);
    let bucket = frames.last().map_or(0, |f| f.bucket + 1);
    let mut frame = HeatMapFrame::from_values(rows, cols, bucket, pred)?;
    frame.normalized = true;
    Ok(frame)
}

/// Value appended to the window after predicting `pred` from a window whose
/// newest step is `last`: the prediction replaces the leading channels and
/// any remaining channels keep their last value.
pub fn next_step(last: &[f64], pred: &[f64]) -> Vec<f64> {
    let mut step = last.to_vec();
    step[..pred.len()].copy_from_slice(pred);
    step
}

/// Shift-and-predict for `horizon` steps; returns the `horizon` predictions.
pub fn recursive_forecast(model: &Model, window: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
    Ok(recursive_forecast_batch(model, &[window.to_vec()], horizon)?.remove(0))
}

/// [`recursive_forecast`] for many windows at once.
pub fn recursive_forecast_batch(
    model: &Model,
    windows: &[Vec<Vec<f64>>],
    horizon: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if horizon < 1 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let mut current: Vec<Vec<Vec<f64>>> = windows.to_vec();
    let mut out = vec![Vec::with_capacity(horizon); windows.len()];
    for _ in 0..horizon {
        let refs: Vec<&[Vec<f64>]> = current.iter().map(Vec::as_slice).collect();
        let preds = model.predict(&refs)?;
        for ((win, pred), acc) in current.iter_mut().zip(preds).zip(out.iter_mut()) {
            let step = next_step(win.last().ok_or_else(|| Error::invalid("empty window"))?, &pred);
            win.remove(0);
            win.push(step);
            acc.push(pred);
        }
    }
    Ok(out)
}

impl Model {
    /// Metadata as ordered key/value pairs (architecture first).
    pub fn metadata(&self) -> Vec<(String, String)> {
        let mut kv = self.arch.to_kv();
        kv.push(("theta_max".into(), format!("{:?}", self.meta.theta_max)));
        kv.push(("seed".into(), self.meta.seed.to_string()));
        if let Some(c) = &self.meta.created {
            kv.push(("created".into(), c.clone()));
        }
        for (k, v) in &self.meta.config {
            kv.push((format!("config.{k}"), v.clone()));
        }
        kv
    }

    pub(crate) fn from_parts(kv: &BTreeMap<String, String>, params: Params, state: Params) -> Result<Model> {
        let arch = Architecture::from_kv(kv)?;
        let template = Model::build(arch, 0, None)?;
        check_layout("parameter", &template.params, &params)?;
        check_layout("state", &template.state, &state)?;
        let theta_max = kv
            .get("theta_max")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("model metadata lacks a numeric theta_max".into()))?;
        let seed = kv
            .get("seed")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("model metadata lacks a numeric seed".into()))?;
        let config = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Model {
            layers: template.layers,
            arch: template.arch,
            params,
            state,
            meta: ModelMeta {
                theta_max,
                seed,
                created: kv.get("created").cloned(),
                config,
            },
        })
    }
}

fn check_layout(what: &str, expected: &Params, got: &Params) -> Result<()> {
    let a: Vec<_> = expected.iter().map(|(k, v)| (k, v.shape())).collect();
    let b: Vec<_> = got.iter().map(|(k, v)| (k, v.shape())).collect();
    if a != b {
        return Err(Error::Format(format!("{what} tensors do not match the architecture")));
    }
    Ok(())
}
