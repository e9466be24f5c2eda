use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plumecast::evaluate::{compare_models, export_triplets, make_sequences, robustness_sweep, Forecaster, Persistence};
use plumecast::ingest::{group_by_node, parse_records, resample_series, write_records, write_series, NodeSeries};
use plumecast::models::{
    build_comparator, build_crnn, recursive_forecast, Architecture, ComparatorConfig, ComparatorKind, CrnnConfig, Model,
};
use plumecast::optimize::{train_with, TrainConfig};
use plumecast::rasterize::{
    compute_voronoi_weights, denormalize_frame, normalize_frame, parse_frame, rasterize_frame, read_frames_dir,
    write_frame, write_frames_dir, FillMode, GridSpec, HeatMapFrame,
};
use plumecast::synth::{
    dense_sites, random_sites, sample_sensors, simulate_plume, Boundary, PlumeConfig, SamplingConfig, Wind,
};

use crate::config::RunConfig;

/// Raised for missing or inconsistent command-line input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| UsageError("this command needs --out".into()).into())
    }

    fn grid(&self) -> Result<GridSpec> {
        let c = &self.cfg;
        Ok(GridSpec::new(
            c.f64("lat_min"),
            c.f64("lat_max"),
            c.f64("lon_min"),
            c.f64("lon_max"),
            c.usize("rows"),
            c.usize("cols"),
        )?)
    }

    fn noise_seeds(&self) -> Vec<u64> {
        (0..self.cfg.u64("noise_seeds").max(1))
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let out = ctx.out()?;
    let grid = ctx.grid()?;
    let spinup = c.usize("spinup");
    let plume = PlumeConfig {
        rows: grid.rows,
        cols: grid.cols,
        steps: c.usize("steps") + spinup,
        diffusion: c.f64("diffusion"),
        wind: Wind::Rotating {
            speed: c.f64("wind_speed"),
            period: c.f64("wind_period"),
            phase: 0.0,
        },
        boundary: match c.str("boundary") {
            "periodic" => Boundary::Periodic,
            _ => Boundary::Outflow,
        },
        emission_jitter: c.f64("emission_jitter"),
        seed: ctx.seed,
        ..scaled_sources(grid.rows, grid.cols)
    };
    let period = c.u64("period") as i64;
    let sampling = SamplingConfig {
        noise: c.f64("read_noise"),
        dropout: c.f64("dropout"),
        period,
        start: 0,
        seed: ctx.seed ^ 0x5eed,
    };
    let start_bucket = SamplingConfig::default().start / period;
    let mut frames = simulate_plume(&plume)?.split_off(spinup);
    for (i, f) in frames.iter_mut().enumerate() {
        f.bucket = start_bucket + i as i64;
    }
    let sites = match c.usize("sensors") {
        0 => dense_sites(&grid),
        n => random_sites(&grid, n, ctx.seed),
    };
    let sampling = SamplingConfig {
        start: start_bucket * period,
        ..sampling
    };
    let records = sample_sensors(&frames, &grid, &sites, &sampling)?;
    write_frames_dir(&out.join("truth"), &frames)?;
    write_output(&out.join("sensors.csv"), write_records(&records)?.as_bytes())?;
    println!(
        "wrote {} frames and {} readings from {} nodes to {}",
        frames.len(),
        records.len(),
        sites.len(),
        out.display()
    );
    Ok(())
}

/// The default two-source layout, moved proportionally onto other grids.
fn scaled_sources(rows: usize, cols: usize) -> PlumeConfig {
    let mut p = PlumeConfig::default();
    let (r0, c0) = (p.rows as f64, p.cols as f64);
    for s in &mut p.sources {
        s.row = ((s.row as f64 / r0 * rows as f64) as usize).min(rows - 1);
        s.col = ((s.col as f64 / c0 * cols as f64) as usize).min(cols - 1);
    }
    p
}

fn load_series(path: &Path, period: i64) -> Result<Vec<NodeSeries>> {
    let records = parse_records(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if records.is_empty() {
        bail!(plumecast::Error::invalid(format!(
            "{} holds no readings",
            path.display()
        )));
    }
    group_by_node(&records)
        .values()
        .map(|r| Ok(resample_series(r, period)?))
        .collect()
}

pub fn ingest(ctx: &Ctx, records: &Path) -> Result<()> {
    let series = load_series(records, ctx.cfg.u64("period") as i64)?;
    let out = ctx.out()?;
    write_output(out, write_series(&series).as_bytes())?;
    let buckets: usize = series.iter().map(NodeSeries::len).sum();
    println!("{} nodes, {buckets} buckets -> {}", series.len(), out.display());
    Ok(())
}

pub fn rasterize(ctx: &Ctx, records: &Path) -> Result<()> {
    let series = load_series(records, ctx.cfg.u64("period") as i64)?;
    let grid = ctx.grid()?;
    let start = series.iter().map(|s| s.start_bucket).min().unwrap_or(0);
    let end = series.iter().map(NodeSeries::end_bucket).max().unwrap_or(0);
    let aligned: Vec<NodeSeries> = series.iter().map(|s| s.aligned_to(start, end)).collect();
    let positions: Vec<(f64, f64)> = aligned.iter().map(|s| s.position).collect();
    let weights = compute_voronoi_weights(&positions, &grid, ctx.cfg.usize("subsample"))?;
    let fill = match ctx.cfg.str("fill") {
        "nearest" => FillMode::Nearest,
        _ => FillMode::Zero,
    };
    let frames = (0..(end - start) as usize)
        .map(|i| {
            let readings: Vec<Option<f64>> = aligned.iter().map(|s| s.values[i]).collect();
            Ok(rasterize_frame(&readings, &weights, start + i as i64, fill)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = ctx.out()?;
    write_frames_dir(out, &frames)?;
    let geo = HeatMapFrame::from_values(grid.rows, grid.cols, 0, weights.density_map())?;
    write_output(&out.join("geography.csv"), write_frame(&geo).as_bytes())?;
    println!(
        "{} frames from {} nodes -> {}",
        frames.len(),
        aligned.len(),
        out.display()
    );
    Ok(())
}

fn load_raw_frames(dir: &Path) -> Result<Vec<HeatMapFrame>> {
    let frames = read_frames_dir(dir).with_context(|| format!("reading frames from {}", dir.display()))?;
    if frames.iter().any(|f| f.normalized) {
        bail!(plumecast::Error::invalid(
            "expected frames in µg/m³, found normalized frames"
        ));
    }
    Ok(frames)
}

fn normalized(frames: &[HeatMapFrame], theta_max: f64) -> Result<Vec<HeatMapFrame>> {
    Ok(frames
        .iter()
        .map(|f| normalize_frame(f, theta_max))
        .collect::<plumecast::Result<_>>()?)
}

fn architecture(cfg: &RunConfig, rows: usize, cols: usize) -> Architecture {
    let window = cfg.usize("window");
    match cfg.str("model") {
        "crnn" => Architecture::Crnn(CrnnConfig {
            rows,
            cols,
            window,
            blocks: cfg.usize("blocks"),
            filters: cfg.usize("filters"),
            penultimate: cfg.usize("penultimate"),
            kernel: cfg.usize("kernel"),
        }),
        other => {
            let kind = ComparatorKind::ALL
                .into_iter()
                .find(|k| k.name() == other)
                .expect("validated model name");
            Architecture::Comparator(ComparatorConfig {
                width: cfg.usize("width"),
                kernel: cfg.usize("kernel"),
                ..ComparatorConfig::new(kind, rows, cols, window)
            })
        }
    }
}

fn frame_samples(frames: &[HeatMapFrame], len: usize) -> Vec<Vec<Vec<f64>>> {
    frames
        .windows(len)
        .map(|w| w.iter().map(|f| f.values.clone()).collect())
        .collect()
}

fn train_split(cfg: &RunConfig, n: usize) -> usize {
    ((n as f64 * cfg.f64("train_fraction")).floor() as usize).min(n)
}

pub fn train(ctx: &Ctx, frames_dir: &Path, geography: Option<&Path>) -> Result<()> {
    let c = &ctx.cfg;
    let out = ctx.out()?;
    let frames = load_raw_frames(frames_dir)?;
    let (rows, cols) = (frames[0].rows, frames[0].cols);
    let split = train_split(c, frames.len());
    let train_frames = &frames[..split];
    let theta_max = match c.f64_or_auto("theta_max") {
        Some(t) => t,
        None => train_frames.iter().map(HeatMapFrame::max).fold(0.0, f64::max),
    };
    if !(theta_max > 0.0) {
        bail!(plumecast::Error::invalid("training frames are all zero; set theta_max"));
    }
    let geo_path = geography.map(Path::to_path_buf).or_else(|| {
        let p = frames_dir.join("geography.csv");
        p.exists().then_some(p)
    });
    let geo = match &geo_path {
        Some(p) => {
            let g = parse_frame(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?;
            if g.rows != rows || g.cols != cols {
                bail!(plumecast::Error::shape(format!(
                    "geography map is {}x{}, frames {rows}x{cols}",
                    g.rows, g.cols
                )));
            }
            Some(g.values)
        }
        None => None,
    };
    let arch = architecture(c, rows, cols);
    let window = arch.window();
    let mut model = match &arch {
        Architecture::Crnn(cfg) => build_crnn(cfg.clone(), geo.as_deref(), ctx.seed)?,
        Architecture::Comparator(cfg) => build_comparator(cfg.clone(), ctx.seed)?,
        Architecture::Baseline(_) => unreachable!("frame models only"),
    };
    let mut samples = frame_samples(&normalized(train_frames, theta_max)?, window + 1);
    if samples.is_empty() {
        bail!(plumecast::Error::invalid(format!(
            "{split} training frames cannot form a window of {}",
            window + 1
        )));
    }
    let n_val = (samples.len() as f64 * c.f64("val_fraction")).floor() as usize;
    let val = samples.split_off(samples.len() - n_val.min(samples.len() - 1));
    let tc = TrainConfig {
        batch_size: c.usize("batch_size"),
        epochs: c.usize("epochs"),
        lr: c.f64("lr"),
        decay_factor: c.f64("decay_factor"),
        patience: c.usize("patience"),
        seed: ctx.seed,
        theta_max,
    };
    model.meta.config = c.entries();
    if !ctx.deterministic {
        model.meta.created = Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    }
    eprintln!(
        "training {} ({} parameters) on {} windows, {} validation, theta_max {theta_max}",
        model.arch.name(),
        model.count_parameters(),
        samples.len(),
        val.len()
    );
    let every = c.usize("checkpoint_every");
    let history = train_with(&mut model, &samples, &val, &tc, |epoch, m| {
        if every > 0 && epoch % every == 0 {
            m.save(&suffixed(out, &format!(".epoch{epoch:04}")))?;
        }
        Ok(())
    })?;
    for r in history.epochs.iter().rev().take(1) {
        eprintln!(
            "epoch {} train loss {:.6} lr_scale {:e}",
            r.epoch, r.train_loss, r.lr_scale
        );
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save(out)?;
    write_output(&suffixed(out, ".history.csv"), history.to_text().as_bytes())?;
    println!("saved {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let m = Model::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if m.arch.grid().is_none() {
        bail!(plumecast::Error::invalid(format!(
            "{} is not a grid model",
            path.display()
        )));
    }
    Ok(m)
}

pub fn predict(ctx: &Ctx, model: &Path, frames_dir: &Path, horizon: Option<usize>) -> Result<()> {
    let model = load_model(model)?;
    let horizon = horizon.unwrap_or(ctx.cfg.usize("horizon"));
    let frames = load_raw_frames(frames_dir)?;
    let t = model.window();
    if frames.len() < t {
        bail!(plumecast::Error::invalid(format!(
            "{} frames, the model needs {t}",
            frames.len()
        )));
    }
    let theta = model.meta.theta_max;
    let recent = normalized(&frames[frames.len() - t..], theta)?;
    let window: Vec<Vec<f64>> = recent.iter().map(|f| f.values.clone()).collect();
    let last = recent.last().expect("non-empty window");
    let preds = recursive_forecast(&model, &window, horizon)?;
    let out_frames = preds
        .into_iter()
        .enumerate()
        .map(|(h, values)| {
            let mut f = HeatMapFrame::from_values(last.rows, last.cols, last.bucket + h as i64 + 1, values)?;
            f.normalized = true;
            Ok(denormalize_frame(&f, theta)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = ctx.out()?;
    write_frames_dir(out, &out_frames)?;
    println!("{horizon} forecast frames -> {}", out.display());
    Ok(())
}

/// Evaluation sequences drawn from `frames`, skipping the training share when
/// `test_only` is set.
fn sequences(ctx: &Ctx, frames_dir: &Path, theta: f64, len: usize, test_only: bool) -> Result<Vec<Vec<HeatMapFrame>>> {
    let frames = load_raw_frames(frames_dir)?;
    let start = if test_only {
        train_split(&ctx.cfg, frames.len())
    } else {
        0
    };
    let norm = normalized(&frames[start..], theta)?;
    let stride = ctx.cfg.usize("eval_stride").max(1);
    let seqs: Vec<Vec<HeatMapFrame>> = if stride >= len {
        make_sequences(&norm, len)
    } else {
        norm.windows(len)
            .step_by(stride)
            .map(<[HeatMapFrame]>::to_vec)
            .collect()
    };
    if seqs.is_empty() {
        bail!(plumecast::Error::invalid(format!(
            "{} frames cannot form an evaluation sequence of {len}",
            norm.len()
        )));
    }
    Ok(seqs)
}

fn emit(ctx: &Ctx, table: &str) -> Result<()> {
    match &ctx.out {
        Some(p) => {
            write_output(p, table.as_bytes())?;
            println!("wrote {}", p.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn shared_theta(models: &[Model]) -> Result<f64> {
    let theta = models[0].meta.theta_max;
    if models.iter().any(|m| m.meta.theta_max != theta) {
        bail!(plumecast::Error::invalid(
            "models were trained with different theta_max"
        ));
    }
    Ok(theta)
}

pub fn eval(ctx: &Ctx, model: &Path, frames_dir: &Path, horizons: Option<usize>, test_only: bool) -> Result<()> {
    let model = load_model(model)?;
    let h = horizons.unwrap_or(ctx.cfg.usize("horizon"));
    let theta = model.meta.theta_max;
    let seqs = sequences(ctx, frames_dir, theta, model.window() + h, test_only)?;
    let report = compare_models(
        &[&model],
        &seqs,
        h,
        theta,
        &ctx.cfg.f64_list("sigmas"),
        &ctx.noise_seeds(),
    )?;
    eprint!("{}", report.summary());
    emit(ctx, &report.to_table())
}

pub fn robustness(ctx: &Ctx, models: &[PathBuf], frames_dir: &Path, test_only: bool) -> Result<()> {
    let models = models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let theta = shared_theta(&models)?;
    let h = ctx.cfg.usize("horizon");
    let t = models.iter().map(Model::window).max().unwrap_or(0);
    let seqs = sequences(ctx, frames_dir, theta, t + h, test_only)?;
    let refs: Vec<&dyn Forecaster> = models.iter().map(|m| m as &dyn Forecaster).collect();
    let rows = robustness_sweep(&refs, &seqs, h, theta, &ctx.cfg.f64_list("sigmas"), &ctx.noise_seeds())?;
    let mut table = String::from("model,sigma,mean_nrmse,mean_accuracy\n");
    for r in rows {
        let m = r.metrics.mean_nrmse();
        table.push_str(&format!("{},{},{m:.6},{:.6}\n", r.model, r.sigma, 1.0 - m));
    }
    emit(ctx, &table)
}

pub fn compare(ctx: &Ctx, models: &[PathBuf], frames_dir: &Path, test_only: bool) -> Result<()> {
    let models = models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let theta = shared_theta(&models)?;
    let h = ctx.cfg.usize("horizon");
    let t = models.iter().map(Model::window).max().unwrap_or(0);
    let seqs = sequences(ctx, frames_dir, theta, t + h, test_only)?;
    let persistence = Persistence { window: t };
    let mut refs: Vec<&dyn Forecaster> = models.iter().map(|m| m as &dyn Forecaster).collect();
    refs.push(&persistence);
    let report = compare_models(&refs, &seqs, h, theta, &ctx.cfg.f64_list("sigmas"), &ctx.noise_seeds())?;
    print!("{}", report.summary());
    emit(ctx, &report.to_table())
}

pub fn export_maps(ctx: &Ctx, model: &Path, frames_dir: &Path, sequence: usize, test_only: bool) -> Result<()> {
    let model = load_model(model)?;
    let h = ctx.cfg.usize("horizon");
    let t = model.window();
    let theta = model.meta.theta_max;
    let seqs = sequences(ctx, frames_dir, theta, t + h, test_only)?;
    let seq = seqs
        .get(sequence)
        .ok_or_else(|| UsageError(format!("sequence {sequence} requested, {} available", seqs.len())))?;
    let window: Vec<Vec<f64>> = seq[..t].iter().map(|f| f.values.clone()).collect();
    let preds = recursive_forecast(&model, &window, h)?
        .into_iter()
        .zip(&seq[t..])
        .map(|(values, truth)| {
            let mut f = HeatMapFrame::from_values(truth.rows, truth.cols, truth.bucket, values)?;
            f.normalized = true;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = ctx.out()?;
    let paths = export_triplets(out, &seq[t..], &preds)?;
    println!("{} maps -> {}", paths.len(), out.display());
    Ok(())
}
