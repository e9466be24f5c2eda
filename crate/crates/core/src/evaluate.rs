//! Forecast scoring: NRMSE, multi-horizon recursive evaluation, noise
//! robustness sweeps and the model comparison report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::models::{recursive_forecast_batch, Model};
use crate::rasterize::{write_pgm, HeatMapFrame};
use crate::{Error, Result};

/// Default noise levels for robustness sweeps.
pub const DEFAULT_SIGMAS: [f64; 3] = [0.0, 0.1, 0.2];

pub const DEFAULT_HORIZON: usize = 12;

/// RMSE between `pred` and `truth`, divided by the mean of `truth`.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} values, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::invalid(format!("truth mean {mean} is not positive")));
    }
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok((sq / n).sqrt() / mean)
}

pub fn nrmse_frames(pred: &HeatMapFrame, truth: &HeatMapFrame) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(Error::shape("frames differ in shape"));
    }
    nrmse(&pred.values, &truth.values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation on normalized values.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "noise sigma {sigma} must be finite and non-negative"
            )));
        }
        Ok(Self { sigma, seed })
    }

    /// Generator for the `stream`-th independent realization.
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// The first `n` perturbations of `stream`, before clamping.
pub fn noise_draws(config: &NoiseConfig, stream: u64, n: usize) -> Vec<f64> {
    if config.sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, config.sigma).expect("validated sigma");
    let mut rng = config.rng(stream);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

fn perturb(values: &mut [f64], draws: &[f64]) {
    for (v, d) in values.iter_mut().zip(draws) {
        *v = (*v + d).clamp(0.0, 1.0);
    }
}

/// Adds clamped Gaussian noise to normalized frames (stream 0).
pub fn add_noise(frames: &[HeatMapFrame], config: &NoiseConfig) -> Result<Vec<HeatMapFrame>> {
    if let Some(f) = frames.iter().find(|f| !f.normalized) {
        return Err(Error::invalid(format!("frame {} is not normalized", f.bucket)));
    }
    if config.sigma == 0.0 {
        return Ok(frames.to_vec());
    }
    let n: usize = frames.iter().map(|f| f.values.len()).sum();
    let draws = noise_draws(config, 0, n);
    let mut out = frames.to_vec();
    let mut offset = 0;
    for f in &mut out {
        let len = f.values.len();
        perturb(&mut f.values, &draws[offset..offset + len]);
        offset += len;
    }
    Ok(out)
}

/// Anything that maps windows of normalized steps to recursive forecasts.
pub trait Forecaster: Sync {
    fn name(&self) -> String;
    fn window(&self) -> usize;
    fn parameter_count(&self) -> usize;
    /// One forecast of `horizon` steps per window.
    fn forecast(&self, windows: &[Vec<Vec<f64>>], horizon: usize) -> Result<Vec<Vec<Vec<f64>>>>;
}

impl Forecaster for Model {
    fn name(&self) -> String {
        self.arch.name().to_string()
    }

    fn window(&self) -> usize {
        Model::window(self)
    }

    fn parameter_count(&self) -> usize {
        self.count_parameters()
    }

    fn forecast(&self, windows: &[Vec<Vec<f64>>], horizon: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        recursive_forecast_batch(self, windows, horizon)
    }
}

/// Repeats the last observed step.
#[derive(Debug, Clone, Copy)]
pub struct Persistence {
    pub window: usize,
}

impl Forecaster for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn window(&self) -> usize {
        self.window
    }

    fn parameter_count(&self) -> usize {
        0
    }

    fn forecast(&self, windows: &[Vec<Vec<f64>>], horizon: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        if horizon < 1 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        windows
            .iter()
            .map(|w| {
                let last = w.last().ok_or_else(|| Error::invalid("empty window"))?;
                Ok(vec![last.clone(); horizon])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetric {
    pub horizon: usize,
    pub nrmse: f64,
    pub accuracy: f64,
    /// Scored (sequence, horizon) pairs.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub horizons: Vec<HorizonMetric>,
    /// Sequences too short to evaluate.
    pub skipped: usize,
    /// Targets whose mean was not positive, so NRMSE is undefined.
    pub undefined: usize,
}

impl Metrics {
    pub fn at(&self, horizon: usize) -> Option<&HorizonMetric> {
        self.horizons.iter().find(|m| m.horizon == horizon)
    }

    /// Mean NRMSE over all horizons.
    pub fn mean_nrmse(&self) -> f64 {
        self.horizons.iter().map(|m| m.nrmse).sum::<f64>() / self.horizons.len().max(1) as f64
    }

    /// Per-horizon average of several runs.
    pub fn average(runs: &[Metrics]) -> Result<Metrics> {
        let first = runs.first().ok_or_else(|| Error::invalid("nothing to average"))?;
        let k = runs.len() as f64;
        let horizons = first
            .horizons
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let nrmse = runs.iter().map(|r| r.horizons[i].nrmse).sum::<f64>() / k;
                HorizonMetric {
                    horizon: h.horizon,
                    nrmse,
                    accuracy: 1.0 - nrmse,
                    n: runs.iter().map(|r| r.horizons[i].n).sum(),
                }
            })
            .collect();
        Ok(Metrics {
            horizons,
            skipped: runs.iter().map(|r| r.skipped).sum(),
            undefined: runs.iter().map(|r| r.undefined).sum(),
        })
    }
}

/// Consecutive non-overlapping runs of `len` frames.
pub fn make_sequences(frames: &[HeatMapFrame], len: usize) -> Vec<Vec<HeatMapFrame>> {
    if len == 0 {
        return Vec::new();
    }
    frames.chunks_exact(len).map(<[HeatMapFrame]>::to_vec).collect()
}

/// Forecasts `horizon` steps from the first `T` frames of each normalized
/// sequence and scores every horizon against the frames that follow.
/// Scoring is on values scaled back by `theta_max`. With `noise`, inputs
/// (never targets) are perturbed; sequence `i` always draws stream `i`.
pub fn evaluate_horizons(
    model: &dyn Forecaster,
    sequences: &[Vec<HeatMapFrame>],
    horizon: usize,
    theta_max: f64,
    noise: Option<&NoiseConfig>,
) -> Result<Metrics> {
    if horizon < 1 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if !(theta_max > 0.0) {
        return Err(Error::invalid("theta_max must be positive"));
    }
    let t = model.window();
    let mut windows = Vec::new();
    let mut truths = Vec::new();
    let mut skipped = 0;
    for (i, seq) in sequences.iter().enumerate() {
        if seq.len() < t + horizon {
            skipped += 1;
            continue;
        }
        let mut window: Vec<Vec<f64>> = seq[..t].iter().map(|f| f.values.clone()).collect();
        if let Some(cfg) = noise.filter(|c| c.sigma > 0.0) {
            let width: usize = window.iter().map(Vec::len).sum();
            let draws = noise_draws(cfg, i as u64, width);
            let mut offset = 0;
            for step in &mut window {
                let len = step.len();
                perturb(step, &draws[offset..offset + len]);
                offset += len;
            }
        }
        windows.push(window);
        truths.push(&seq[t..t + horizon]);
    }
    let forecasts = if windows.is_empty() {
        Vec::new()
    } else {
        model.forecast(&windows, horizon)?
    };
    let mut sums = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    let mut undefined = 0;
    for (pred, truth) in forecasts.iter().zip(&truths) {
        for h in 0..horizon {
            let p: Vec<f64> = pred[h].iter().map(|v| v * theta_max).collect();
            let tr: Vec<f64> = truth[h].values.iter().map(|v| v * theta_max).collect();
            if tr.iter().sum::<f64>() <= 0.0 {
                undefined += 1;
                continue;
            }
            sums[h] += nrmse(&p, &tr)?;
            counts[h] += 1;
        }
    }
    let horizons = (0..horizon)
        .map(|h| {
            let nrmse = if counts[h] > 0 {
                sums[h] / counts[h] as f64
            } else {
                f64::NAN
            };
            HorizonMetric {
                horizon: h + 1,
                nrmse,
                accuracy: 1.0 - nrmse,
                n: counts[h],
            }
        })
        .collect();
    Ok(Metrics {
        horizons,
        skipped,
        undefined,
    })
}

/// One (model, sigma) cell of a sweep, averaged over noise seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub sigma: f64,
    pub metrics: Metrics,
}

/// Evaluates every model at every sigma; each (sigma, seed) pair produces the
/// same noise for every model.
pub fn robustness_sweep(
    models: &[&dyn Forecaster],
    sequences: &[Vec<HeatMapFrame>],
    horizon: usize,
    theta_max: f64,
    sigmas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one noise seed"));
    }
    let mut rows = Vec::new();
    for m in models {
        for &sigma in sigmas {
            let runs = if sigma == 0.0 {
                vec![evaluate_horizons(*m, sequences, horizon, theta_max, None)?]
            } else {
                seeds
                    .iter()
                    .map(|&s| {
                        let cfg = NoiseConfig::new(sigma, s)?;
                        evaluate_horizons(*m, sequences, horizon, theta_max, Some(&cfg))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            rows.push(SweepRow {
                model: m.name(),
                sigma,
                metrics: Metrics::average(&runs)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub name: String,
    pub parameters: usize,
    /// One entry per sigma, in sweep order; sigma 0 is the plain evaluation.
    pub noise: Vec<(f64, Metrics)>,
}

impl ModelReport {
    pub fn clean(&self) -> Option<&Metrics> {
        self.noise.iter().find(|(s, _)| *s == 0.0).map(|(_, m)| m)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonReport {
    pub models: Vec<ModelReport>,
}

impl ComparisonReport {
    pub fn get(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Rows of `model,sigma,horizon,nrmse,accuracy,n`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("model,sigma,horizon,nrmse,accuracy,n\n");
        for m in &self.models {
            for (sigma, metrics) in &m.noise {
                for h in &metrics.horizons {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:.6},{:.6},{}",
                        m.name, sigma, h.horizon, h.nrmse, h.accuracy, h.n
                    );
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10} {:>10}",
            "model", "params", "nrmse@1", "nrmse@H", "mean"
        );
        for m in &self.models {
            if let Some(c) = m.clean() {
                let first = c.horizons.first().map_or(f64::NAN, |h| h.nrmse);
                let last = c.horizons.last().map_or(f64::NAN, |h| h.nrmse);
                let _ = writeln!(
                    s,
                    "{:<12} {:>10} {:>10.4} {:>10.4} {:>10.4}",
                    m.name,
                    m.parameters,
                    first,
                    last,
                    c.mean_nrmse()
                );
            }
        }
        for m in &self.models {
            let noisy: Vec<String> = m
                .noise
                .iter()
                .map(|(sigma, metrics)| format!("sigma {sigma}: {:.4}", metrics.mean_nrmse()))
                .collect();
            let _ = writeln!(s, "{} mean nrmse by noise: {}", m.name, noisy.join(", "));
        }
        s
    }
}

/// Evaluates every model on the same sequences and noise realizations.
pub fn compare_models(
    models: &[&dyn Forecaster],
    sequences: &[Vec<HeatMapFrame>],
    horizon: usize,
    theta_max: f64,
    sigmas: &[f64],
    seeds: &[u64],
) -> Result<ComparisonReport> {
    let mut sigmas = sigmas.to_vec();
    if !sigmas.contains(&0.0) {
        sigmas.insert(0, 0.0);
    }
    let rows = robustness_sweep(models, sequences, horizon, theta_max, &sigmas, seeds)?;
    let models = models
        .iter()
        .map(|m| {
            let name = m.name();
            ModelReport {
                noise: rows
                    .iter()
                    .filter(|r| r.model == name)
                    .map(|r| (r.sigma, r.metrics.clone()))
                    .collect(),
                parameters: m.parameter_count(),
                name,
            }
        })
        .collect();
    Ok(ComparisonReport { models })
}

/// Writes truth, prediction and absolute-error graymaps for each horizon:
/// `h01_truth.pgm`, `h01_pred.pgm`, `h01_error.pgm`, ...
pub fn export_triplets(dir: &Path, truth: &[HeatMapFrame], pred: &[HeatMapFrame]) -> Result<Vec<PathBuf>> {
    if truth.len() != pred.len() {
        return Err(Error::shape("truth and prediction differ in length"));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (h, (t, p)) in truth.iter().zip(pred).enumerate() {
        if !t.same_shape(p) {
            return Err(Error::shape("truth and prediction frames differ in shape"));
        }
        let mut err = t.clone();
        for (e, v) in err.values.iter_mut().zip(&p.values) {
            *e = (*e - v).abs();
        }
        for (kind, frame) in [("truth", t), ("pred", p), ("error", &err)] {
            let path = dir.join(format!("h{:02}_{kind}.pgm", h + 1));
            std::fs::write(&path, write_pgm(frame)?)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
