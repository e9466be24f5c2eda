//! Loss, Adadelta with a schedulable step multiplier, and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Params, Tensor};
use crate::models::{Mode, Model};
use crate::{Error, Result};

pub const RHO: f64 = 0.95;
pub const EPSILON: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 2e-4;
pub const LR_FLOOR: f64 = 1e-8;
/// Minimum validation-loss decrease that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-6;

/// Mean binary cross-entropy with clipped probabilities.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let e = g.bce(p, target.clone())?;
    g.value(e).item()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    pub lr_scale: f64,
    /// Per parameter: (E[g^2], E[dx^2]).
    acc: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdadeltaState {
    pub fn new(params: &Params, lr_scale: f64) -> Self {
        let acc = params
            .iter()
            .map(|(k, v)| (k.clone(), (vec![0.0; v.len()], vec![0.0; v.len()])))
            .collect();
        Self {
            rho: RHO,
            eps: EPSILON,
            lr_scale,
            acc,
        }
    }

    /// `(E[g^2], E[dx^2])` for one parameter.
    pub fn accumulators(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.acc.get(name).map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    /// One update. Gradients are validated before anything is modified.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
            }
            if !self.acc.contains_key(name) {
                return Err(Error::invalid(format!("optimizer has no state for `{name}`")));
            }
        }
        let (rho, eps, lr) = (self.rho, self.eps, self.lr_scale);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let (eg, edx) = self.acc.get_mut(name).expect("checked above");
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                eg[i] = rho * eg[i] + (1.0 - rho) * g[i] * g[i];
                let delta = -((edx[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g[i];
                edx[i] = rho * edx[i] + (1.0 - rho) * delta * delta;
                *x += lr * delta;
            }
        }
        Ok(())
    }
}

pub fn adadelta_step(params: &mut Params, grads: &Gradients, state: &mut AdadeltaState) -> Result<()> {
    state.step(params, grads)
}

/// Multiplies the step size by `factor` after `patience` epochs without a
/// validation improvement of at least [`PLATEAU_THRESHOLD`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::invalid(format!("decay factor {factor} outside (0, 1)")));
        }
        Ok(Self {
            factor,
            patience: patience.max(1),
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Feeds one epoch's validation loss; returns the step size to use next.
    pub fn observe(&mut self, val_loss: f64, lr_scale: f64) -> f64 {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.wait = 0;
            return lr_scale;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr_scale * self.factor).max(LR_FLOOR);
        }
        lr_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub seed: u64,
    pub theta_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 500,
            lr: DEFAULT_LR,
            decay_factor: 0.8,
            patience: 10,
            seed: 0,
            theta_max: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.theta_max > 0.0) {
            return Err(Error::invalid("theta_max must be positive"));
        }
        PlateauScheduler::new(self.decay_factor, self.patience).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation samples were given.
    pub val_loss: Option<f64>,
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,train_loss,val_loss,lr_scale` rows under a header line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr_scale\n");
        for r in &self.epochs {
            let val = r.val_loss.map_or("NA".to_string(), |v| format!("{v:?}"));
            let _ = writeln!(s, "{},{:?},{},{:?}", r.epoch, r.train_loss, val, r.lr_scale);
        }
        s
    }
}

/// Mean loss over `samples` in inference mode.
pub fn dataset_loss(model: &Model, samples: &[Vec<Vec<f64>>], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&[Vec<f64>]> = chunk.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let (loss, _) = model.loss(&mut g, &bound, &refs, Mode::Infer)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place; see [`train_with`].
pub fn train(
    model: &mut Model,
    train_set: &[Vec<Vec<f64>>],
    val_set: &[Vec<Vec<f64>>],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(model, train_set, val_set, config, |_, _| Ok(()))
}

/// Mini-batch training. Each sample is `T + 1` steps (input window then
/// target). Batches are drawn from a seeded shuffle each epoch; the last
/// batch may be short. `on_epoch` runs after every epoch with the epoch
/// number and the current model.
pub fn train_with<F>(
    model: &mut Model,
    train_set: &[Vec<Vec<f64>>],
    val_set: &[Vec<Vec<f64>>],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    model.meta.seed = config.seed;
    model.meta.theta_max = config.theta_max;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdadeltaState::new(&model.params, config.lr);
    let mut sched = PlateauScheduler::new(config.decay_factor, config.patience)?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&[Vec<f64>]> = idx.iter().map(|&i| train_set[i].as_slice()).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let (loss, stats) = model.loss(&mut g, &bound, &batch, Mode::Train(&mut rng))?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(&mut model.params, &grads).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", bi + 1)),
                other => other,
            })?;
            model.update_running_stats(&stats)?;
            total += value * idx.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(dataset_loss(model, val_set, config.batch_size)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_scale: opt.lr_scale,
        });
        opt.lr_scale = sched.observe(val_loss.unwrap_or(train_loss), opt.lr_scale);
        on_epoch(epoch, model)?;
    }
    Ok(history)
}
