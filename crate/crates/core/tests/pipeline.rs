use plumecast::evaluate::{
    add_noise, compare_models, evaluate_horizons, noise_draws, robustness_sweep, Forecaster, NoiseConfig, Persistence,
};
use plumecast::ingest::group_by_node;
use plumecast::models::{build_crnn, CrnnConfig};
use plumecast::rasterize::{
    compute_voronoi_weights, normalize_frame, rasterize_frame, FillMode, GridSpec, HeatMapFrame,
};
use plumecast::synth::{
    dense_sites, persistence_forecast, random_sites, sample_sensors, simulate_plume, Boundary, PlumeConfig,
    SamplingConfig, SensorSite, Wind,
};

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

/// A Gaussian blob on a constant background carried by a steady wind.
fn advecting_frames(steps: usize) -> Vec<HeatMapFrame> {
    let (rows, cols) = (20, 20);
    let init = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64 - 6.0, (i % cols) as f64 - 6.0);
            2.0 + 50.0 * (-(r * r + c * c) / 8.0).exp()
        })
        .collect();
    let cfg = PlumeConfig {
        rows,
        cols,
        steps,
        diffusion: 0.0,
        wind: Wind::Constant(0.5, 0.25),
        sources: Vec::new(),
        boundary: Boundary::Periodic,
        emission_jitter: 0.0,
        initial: Some(init),
        ..PlumeConfig::default()
    };
    simulate_plume(&cfg).unwrap()
}

fn normalize_all(frames: &[HeatMapFrame], theta: f64) -> Vec<HeatMapFrame> {
    frames.iter().map(|f| normalize_frame(f, theta).unwrap()).collect()
}

#[test]
fn simulation_is_deterministic_and_non_negative() {
    let a = simulate_plume(&PlumeConfig::default()).unwrap();
    let b = simulate_plume(&PlumeConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 600);
    assert!(a.iter().flat_map(|f| &f.values).all(|v| *v >= 0.0));
    let other = simulate_plume(&PlumeConfig {
        seed: 1,
        ..PlumeConfig::default()
    })
    .unwrap();
    assert_ne!(a, other);
}

#[test]
fn read_noise_has_the_requested_spread() {
    let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 10, 10).unwrap();
    let frame = HeatMapFrame::from_values(10, 10, 0, vec![100.0; 100]).unwrap();
    let sites = dense_sites(&grid);
    let cfg = SamplingConfig {
        noise: 0.5,
        seed: 11,
        ..SamplingConfig::default()
    };
    let recs = sample_sensors(&vec![frame; 100], &grid, &sites, &cfg).unwrap();
    assert_eq!(recs.len(), 10_000);
    let errs: Vec<f64> = recs.iter().map(|r| r.pm25 - 100.0).collect();
    assert!((std_dev(&errs) - 0.5).abs() <= 0.025, "{}", std_dev(&errs));
}

#[test]
fn sampling_interpolates_between_centres() {
    let grid = GridSpec::new(0.0, 2.0, 0.0, 2.0, 2, 2).unwrap();
    // Values 0, 10 on the south row, 20, 30 on the north row.
    let frame = HeatMapFrame::from_values(2, 2, 0, vec![0.0, 10.0, 20.0, 30.0]).unwrap();
    let site = |lat, lon| SensorSite {
        node_id: "s".into(),
        latitude: lat,
        longitude: lon,
    };
    let sites = [site(1.0, 1.0), site(0.5, 1.0), site(0.1, 0.1)];
    let recs = sample_sensors(&[frame], &grid, &sites, &SamplingConfig::default()).unwrap();
    let got: Vec<f64> = recs.iter().map(|r| r.pm25).collect();
    assert!((got[0] - 15.0).abs() < 1e-12);
    assert!((got[1] - 5.0).abs() < 1e-12);
    assert!(got[2].abs() < 1e-12);
}

#[test]
fn dense_sampling_round_trips_through_rasterization() {
    let cfg = PlumeConfig {
        steps: 120,
        ..PlumeConfig::default()
    };
    let frames = simulate_plume(&cfg).unwrap();
    let grid = GridSpec::new(24.0, 25.0, 120.5, 121.5, 20, 20).unwrap();
    let sites = dense_sites(&grid);
    let recs = sample_sensors(&frames, &grid, &sites, &SamplingConfig::default()).unwrap();
    let groups = group_by_node(&recs);
    let order: Vec<&str> = sites.iter().map(|s| s.node_id.as_str()).collect();
    let positions: Vec<(f64, f64)> = sites.iter().map(|s| (s.latitude, s.longitude)).collect();
    let weights = compute_voronoi_weights(&positions, &grid, 16).unwrap();
    for (i, truth) in frames.iter().enumerate().skip(24) {
        let readings: Vec<Option<f64>> = order.iter().map(|id| Some(groups[*id][i].pm25)).collect();
        let rebuilt = rasterize_frame(&readings, &weights, truth.bucket, FillMode::Zero).unwrap();
        let mae = rebuilt
            .values
            .iter()
            .zip(&truth.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / truth.values.len() as f64;
        assert!(mae <= 0.05 * truth.mean(), "frame {i}: mae {mae} mean {}", truth.mean());
    }
}

#[test]
fn random_sites_lie_inside_the_grid() {
    let grid = GridSpec::new(24.0, 25.0, 120.5, 121.5, 8, 8).unwrap();
    let sites = random_sites(&grid, 200, 3);
    assert!(sites.iter().all(|s| grid.sector_of(s.latitude, s.longitude).is_some()));
    assert_eq!(sites, random_sites(&grid, 200, 3));
}

#[test]
fn persistence_error_grows_on_an_advecting_field() {
    let frames = advecting_frames(80);
    let theta = frames.iter().map(HeatMapFrame::max).fold(0.0, f64::max);
    let norm = normalize_all(&frames, theta);
    let seqs: Vec<Vec<HeatMapFrame>> = norm.windows(24).step_by(8).map(<[_]>::to_vec).collect();
    let m = evaluate_horizons(&Persistence { window: 12 }, &seqs, 12, theta, None).unwrap();
    let e: Vec<f64> = m.horizons.iter().map(|h| h.nrmse).collect();
    assert!(e.windows(2).all(|w| w[1] > w[0]), "{e:?}");
    assert!(e[5] > e[0]);
}

#[test]
fn persistence_forecast_of_a_static_field_is_exact() {
    let f = HeatMapFrame::from_values(2, 2, 3, vec![4.0, 5.0, 6.0, 7.0]).unwrap();
    let p = persistence_forecast(&f, 1).unwrap();
    assert_eq!(p[0].values, f.values);
    let mut n = f.clone();
    n.values.iter_mut().for_each(|v| *v /= 10.0);
    n.normalized = true;
    let seq = vec![n; 20];
    let m = evaluate_horizons(&Persistence { window: 8 }, &[seq], 12, 10.0, None).unwrap();
    assert!(m.horizons.iter().all(|h| h.nrmse == 0.0));
}

/// Looks the answer up in the sequences it was built from.
struct Oracle {
    sequences: Vec<Vec<HeatMapFrame>>,
    window: usize,
}

impl Forecaster for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn window(&self) -> usize {
        self.window
    }

    fn parameter_count(&self) -> usize {
        0
    }

    fn forecast(&self, windows: &[Vec<Vec<f64>>], horizon: usize) -> plumecast::Result<Vec<Vec<Vec<f64>>>> {
        Ok(windows
            .iter()
            .map(|w| {
                let seq = self
                    .sequences
                    .iter()
                    .find(|s| s[..self.window].iter().zip(w).all(|(f, v)| &f.values == v))
                    .expect("known window");
                seq[self.window..self.window + horizon]
                    .iter()
                    .map(|f| f.values.clone())
                    .collect()
            })
            .collect())
    }
}

#[test]
fn perfect_oracle_scores_zero() {
    let frames = advecting_frames(60);
    let norm = normalize_all(&frames, 60.0);
    let seqs: Vec<Vec<HeatMapFrame>> = norm.chunks_exact(20).map(<[_]>::to_vec).collect();
    let oracle = Oracle {
        sequences: seqs.clone(),
        window: 8,
    };
    let m = evaluate_horizons(&oracle, &seqs, 12, 60.0, None).unwrap();
    assert!(m.horizons.iter().all(|h| h.nrmse == 0.0 && h.n == 3));
}

fn tiny_crnn() -> plumecast::models::Model {
    let cfg = CrnnConfig {
        rows: 6,
        cols: 6,
        window: 4,
        blocks: 1,
        filters: 2,
        penultimate: 2,
        kernel: 3,
    };
    build_crnn(cfg, None, 9).unwrap()
}

fn small_sequences() -> (Vec<Vec<HeatMapFrame>>, f64) {
    let cfg = PlumeConfig {
        rows: 6,
        cols: 6,
        steps: 140,
        sources: vec![plumecast::synth::Source {
            row: 2,
            col: 2,
            rate: 20.0,
            period: 12,
            on_steps: 6,
            phase: 0,
        }],
        ..PlumeConfig::default()
    };
    let frames = simulate_plume(&cfg).unwrap().split_off(20);
    let theta = frames.iter().map(HeatMapFrame::max).fold(0.0, f64::max);
    let norm = normalize_all(&frames, theta);
    (norm.windows(10).step_by(5).map(<[_]>::to_vec).collect(), theta)
}

#[test]
fn horizon_one_matches_longer_runs_exactly() {
    let model = tiny_crnn();
    let (seqs, theta) = small_sequences();
    let one = evaluate_horizons(&model, &seqs, 1, theta, None).unwrap();
    let six = evaluate_horizons(&model, &seqs, 6, theta, None).unwrap();
    assert_eq!(one.horizons[0], six.horizons[0]);
    assert_eq!(six.horizons.len(), 6);
}

#[test]
fn sweep_at_zero_noise_is_the_plain_evaluation() {
    let model = tiny_crnn();
    let (seqs, theta) = small_sequences();
    let plain = evaluate_horizons(&model, &seqs, 3, theta, None).unwrap();
    let rows = robustness_sweep(&[&model], &seqs, 3, theta, &[0.0, 0.1], &[1, 2]).unwrap();
    assert_eq!(rows[0].metrics, plain);
    assert_eq!(rows[1].sigma, 0.1);
}

#[test]
fn report_is_independent_of_model_order() {
    let model = tiny_crnn();
    let pers = Persistence { window: 4 };
    let (seqs, theta) = small_sequences();
    let a = compare_models(&[&model, &pers], &seqs, 3, theta, &[0.1, 0.2], &[4, 5, 6]).unwrap();
    let b = compare_models(&[&pers, &model], &seqs, 3, theta, &[0.1, 0.2], &[4, 5, 6]).unwrap();
    assert_eq!(a.get("crnn"), b.get("crnn"));
    assert_eq!(a.get("persistence"), b.get("persistence"));
    let names: Vec<&str> = a.models.iter().map(|m| m.name.as_str()).collect();
    assert_eq!(names, ["crnn", "persistence"]);
    assert_eq!(a.get("crnn").unwrap().parameters, model.count_parameters());
    assert_eq!(a.get("persistence").unwrap().parameters, 0);
    // Header plus 2 models x 3 sigmas x 3 horizons.
    assert_eq!(a.to_table().lines().count(), 1 + 2 * 3 * 3);
}

#[test]
fn persistence_error_rises_with_input_noise() {
    let (seqs, theta) = small_sequences();
    let seeds: Vec<u64> = (0..10).collect();
    let rows = robustness_sweep(&[&Persistence { window: 4 }], &seqs, 4, theta, &[0.0, 0.1, 0.2], &seeds).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.metrics.mean_nrmse()).collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
}

#[test]
fn injected_noise_has_the_requested_spread() {
    let mut f = HeatMapFrame::from_values(40, 40, 0, vec![0.5; 1600]).unwrap();
    f.normalized = true;
    let frames = vec![f; 100];
    let cfg = NoiseConfig::new(0.2, 21).unwrap();
    let draws = noise_draws(&cfg, 0, 160_000);
    assert!((std_dev(&draws) - 0.2).abs() <= 0.01, "{}", std_dev(&draws));
    let noisy = add_noise(&frames, &cfg).unwrap();
    for (v, d) in noisy.iter().flat_map(|f| &f.values).zip(&draws) {
        assert_eq!(*v, (0.5 + d).clamp(0.0, 1.0));
    }
}
