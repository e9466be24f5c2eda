//! Synthetic ground truth: an advection-diffusion plume on the sector grid,
//! virtual sensors that sample it, and the persistence forecast.
//!
//! Units are cells and simulation steps; one step is one time bucket.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::SensorRecord;
use crate::rasterize::{GridSpec, HeatMapFrame};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    Periodic,
    /// Zero-concentration ghost cells: material leaves and nothing enters.
    #[default]
    Outflow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Wind {
    /// `(u, v)` in cells per step; `u` points east (increasing column),
    /// `v` north (increasing row).
    Constant(f64, f64),
    /// Constant speed whose heading turns once every `period` steps.
    Rotating { speed: f64, period: f64, phase: f64 },
    /// One `(u, v)` per step.
    Series(Vec<(f64, f64)>),
}

impl Wind {
    pub fn at(&self, step: usize) -> (f64, f64) {
        match self {
            Wind::Constant(u, v) => (*u, *v),
            Wind::Rotating { speed, period, phase } => {
                let a = TAU * step as f64 / period + phase;
                (speed * a.cos(), speed * a.sin())
            }
            Wind::Series(s) => s[step.min(s.len() - 1)],
        }
    }

    fn max_sum(&self, steps: usize) -> f64 {
        match self {
            Wind::Constant(u, v) => u.abs() + v.abs(),
            Wind::Rotating { speed, .. } => speed.abs() * std::f64::consts::SQRT_2,
            Wind::Series(s) => s
                .iter()
                .take(steps.max(1))
                .fold(0.0, |m, (u, v)| m.max(u.abs() + v.abs())),
        }
    }

    fn max_component(&self, steps: usize) -> f64 {
        match self {
            Wind::Constant(u, v) => u.abs().max(v.abs()),
            Wind::Rotating { speed, .. } => speed.abs(),
            Wind::Series(s) => s
                .iter()
                .take(steps.max(1))
                .fold(0.0, |m, (u, v)| m.max(u.abs()).max(v.abs())),
        }
    }
}

/// Point emission switched on for `on_steps` of every `period` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub row: usize,
    pub col: usize,
    /// Mass added per unit time while on.
    pub rate: f64,
    pub period: usize,
    pub on_steps: usize,
    pub phase: usize,
}

impl Source {
    pub fn is_on(&self, step: usize) -> bool {
        self.period == 0 || (step + self.phase) % self.period < self.on_steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlumeConfig {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub dt: f64,
    pub diffusion: f64,
    pub wind: Wind,
    pub sources: Vec<Source>,
    pub boundary: Boundary,
    /// First-order loss rate per unit time.
    pub decay: f64,
    /// Uniform mass added per cell and unit time.
    pub background: f64,
    /// Relative standard deviation of per-step emission fluctuations.
    pub emission_jitter: f64,
    /// Starting field (row-major); zeros when absent.
    pub initial: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for PlumeConfig {
    /// 20x20 grid, 600 steps, two sources on a 12-step (one day at two-hour
    /// buckets) schedule, slowly rotating wind.
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            steps: 600,
            dt: 1.0,
            diffusion: 0.06,
            wind: Wind::Rotating {
                speed: 0.5,
                period: 240.0,
                phase: 0.0,
            },
            sources: vec![
                Source {
                    row: 6,
                    col: 7,
                    rate: 40.0,
                    period: 12,
                    on_steps: 7,
                    phase: 0,
                },
                Source {
                    row: 13,
                    col: 12,
                    rate: 30.0,
                    period: 12,
                    on_steps: 5,
                    phase: 6,
                },
            ],
            boundary: Boundary::Outflow,
            decay: 0.0,
            background: 0.0,
            emission_jitter: 0.1,
            initial: None,
            seed: 0,
        }
    }
}

impl PlumeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("plume grid needs at least one cell"));
        }
        if !(self.dt > 0.0) || self.diffusion < 0.0 || self.decay < 0.0 || self.background < 0.0 {
            return Err(Error::invalid(
                "dt must be positive; diffusion, decay and background non-negative",
            ));
        }
        let adv = self.wind.max_component(self.steps) * self.dt;
        if !(adv <= 1.0) {
            return Err(Error::Stability(format!(
                "advection CFL: max(|u|,|v|)*dt = {adv} exceeds 1 cell"
            )));
        }
        let diff = self.diffusion * self.dt;
        if !(diff <= 0.25) {
            return Err(Error::Stability(format!(
                "diffusion bound: D*dt = {diff} exceeds 0.25 cell^2"
            )));
        }
        let sum = self.wind.max_sum(self.steps) * self.dt + 4.0 * diff;
        if !(sum <= 1.0) {
            return Err(Error::Stability(format!(
                "positivity bound: (|u|+|v|)*dt + 4*D*dt = {sum} exceeds 1"
            )));
        }
        if let Some(s) = self.sources.iter().find(|s| s.row >= self.rows || s.col >= self.cols) {
            return Err(Error::invalid(format!(
                "source at ({}, {}) outside the grid",
                s.row, s.col
            )));
        }
        if let Some(init) = &self.initial {
            if init.len() != self.rows * self.cols {
                return Err(Error::shape("initial field does not match the grid"));
            }
            if init.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("initial field must be finite and non-negative"));
            }
        }
        if let Wind::Series(s) = &self.wind {
            if s.is_empty() {
                return Err(Error::invalid("wind series is empty"));
            }
        }
        Ok(())
    }
}

/// One explicit step of upwind advection plus 5-point diffusion, written in
/// flux form so that periodic domains conserve mass exactly.
#[allow(clippy::too_many_arguments)]
fn transport(
    c: &[f64],
    out: &mut [f64],
    rows: usize,
    cols: usize,
    (u, v): (f64, f64),
    d: f64,
    dt: f64,
    boundary: Boundary,
) {
    let at = |r: isize, q: isize| -> f64 {
        match boundary {
            Boundary::Periodic => {
                let r = r.rem_euclid(rows as isize) as usize;
                let q = q.rem_euclid(cols as isize) as usize;
                c[r * cols + q]
            }
            Boundary::Outflow => {
                if r < 0 || q < 0 || r >= rows as isize || q >= cols as isize {
                    0.0
                } else {
                    c[r as usize * cols + q as usize]
                }
            }
        }
    };
    // Flux across the face between `a` (low side) and `b` (high side).
    let flux = |vel: f64, a: f64, b: f64| vel.max(0.0) * a + vel.min(0.0) * b - d * (b - a);
    for r in 0..rows as isize {
        for q in 0..cols as isize {
            let here = at(r, q);
            let east = flux(u, here, at(r, q + 1));
            let west = flux(u, at(r, q - 1), here);
            let north = flux(v, here, at(r + 1, q));
            let south = flux(v, at(r - 1, q), here);
            out[r as usize * cols + q as usize] = here - dt * (east - west + north - south);
        }
    }
}

/// Runs the simulation and returns one raw frame per step (the state after
/// that step), with bucket indices `0..steps`.
pub fn simulate_plume(config: &PlumeConfig) -> Result<Vec<HeatMapFrame>> {
    config.validate()?;
    let (rows, cols) = (config.rows, config.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, config.emission_jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut field = config.initial.clone().unwrap_or_else(|| vec![0.0; rows * cols]);
    let mut next = vec![0.0; rows * cols];
    let mut frames = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        transport(
            &field,
            &mut next,
            rows,
            cols,
            config.wind.at(step),
            config.diffusion,
            config.dt,
            config.boundary,
        );
        for s in &config.sources {
            if s.is_on(step) {
                let amp = if config.emission_jitter > 0.0 {
                    (1.0 + jitter.sample(&mut rng)).max(0.0)
                } else {
                    1.0
                };
                next[s.row * cols + s.col] += s.rate * amp * config.dt;
            }
        }
        let keep = 1.0 - config.decay * config.dt;
        let add = config.background * config.dt;
        for v in next.iter_mut() {
            if config.decay > 0.0 || config.background > 0.0 {
                *v = *v * keep + add;
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        std::mem::swap(&mut field, &mut next);
        frames.push(HeatMapFrame::from_values(rows, cols, step as i64, field.clone())?);
    }
    Ok(frames)
}

/// Bilinear interpolation between sector centres; positions beyond the
/// outermost centres take the edge value.
pub fn bilinear(frame: &HeatMapFrame, grid: &GridSpec, lat: f64, lon: f64) -> Result<f64> {
    if grid.sector_of(lat, lon).is_none() {
        return Err(Error::invalid(format!("position ({lat}, {lon}) outside the grid")));
    }
    if frame.rows != grid.rows || frame.cols != grid.cols {
        return Err(Error::shape("frame does not match the grid"));
    }
    let y = ((lat - grid.lat_min) / grid.dlat() - 0.5).clamp(0.0, (grid.rows - 1) as f64);
    let x = ((lon - grid.lon_min) / grid.dlon() - 0.5).clamp(0.0, (grid.cols - 1) as f64);
    let (r0, c0) = (y.floor() as usize, x.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(grid.rows - 1), (c0 + 1).min(grid.cols - 1));
    let (fy, fx) = (y - r0 as f64, x - c0 as f64);
    let top = frame.get(r0, c0) * (1.0 - fx) + frame.get(r0, c1) * fx;
    let bottom = frame.get(r1, c0) * (1.0 - fx) + frame.get(r1, c1) * fx;
    Ok(top * (1.0 - fy) + bottom * fy)
}

/// A virtual node.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSite {
    pub node_id: String,
    pub latitude: f64,
    pub longitude: f64,
}

/// `n` sites at seeded uniform positions inside the grid.
pub fn random_sites(grid: &GridSpec, n: usize, seed: u64) -> Vec<SensorSite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| SensorSite {
            node_id: format!("node{i:04}"),
            latitude: rng.random_range(grid.lat_min..grid.lat_max),
            longitude: rng.random_range(grid.lon_min..grid.lon_max),
        })
        .collect()
}

/// One site at every sector centre.
pub fn dense_sites(grid: &GridSpec) -> Vec<SensorSite> {
    let mut out = Vec::with_capacity(grid.sectors());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (lat, lon) = grid.sector_center(r, c);
            out.push(SensorSite {
                node_id: format!("r{r:03}c{c:03}"),
                latitude: lat,
                longitude: lon,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// Read-noise standard deviation.
    pub noise: f64,
    /// Probability that a reading is lost.
    pub dropout: f64,
    /// Seconds per frame; frame `i` is stamped at `start + i * period`.
    pub period: i64,
    pub start: i64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            noise: 0.0,
            dropout: 0.0,
            period: crate::ingest::DEFAULT_PERIOD_SECONDS,
            start: 1_600_000_000 - 1_600_000_000 % crate::ingest::DEFAULT_PERIOD_SECONDS,
            seed: 0,
        }
    }
}

/// Reads every site in every frame (frame-major, site order within a frame).
pub fn sample_sensors(
    frames: &[HeatMapFrame],
    grid: &GridSpec,
    sites: &[SensorSite],
    config: &SamplingConfig,
) -> Result<Vec<SensorRecord>> {
    if !(0.0..=1.0).contains(&config.dropout) || !(config.noise >= 0.0) {
        return Err(Error::invalid(
            "dropout must lie in [0, 1] and noise must be non-negative",
        ));
    }
    for s in sites {
        if grid.sector_of(s.latitude, s.longitude).is_none() {
            return Err(Error::invalid(format!(
                "site {} at ({}, {}) lies outside the grid",
                s.node_id, s.latitude, s.longitude
            )));
        }
    }
    let normal = Normal::new(0.0, config.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let ts = config.start + i as i64 * config.period;
        for s in sites {
            let truth = bilinear(f, grid, s.latitude, s.longitude)?;
            let noise = if config.noise > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            let lost = config.dropout > 0.0 && rng.random::<f64>() < config.dropout;
            if !lost {
                out.push(SensorRecord::new(
                    s.node_id.clone(),
                    s.latitude,
                    s.longitude,
                    ts,
                    (truth + noise).max(0.0),
                )?);
            }
        }
    }
    Ok(out)
}

/// `horizon` copies of `last`.
pub fn persistence_forecast(last: &HeatMapFrame, horizon: usize) -> Result<Vec<HeatMapFrame>> {
    if horizon < 1 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    Ok((1..=horizon as i64)
        .map(|h| HeatMapFrame {
            bucket: last.bucket + h,
            ..last.clone()
        })
        .collect())
}
