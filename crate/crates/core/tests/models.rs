use plumecast::autodiff::Tensor;
use plumecast::models::{
    build_baseline, build_comparator, build_crnn, forward_baseline, forward_crnn, recursive_forecast, Activation,
    BaselineConfig, CellKind, ComparatorConfig, ComparatorKind, CrnnConfig, Model,
};
use plumecast::rasterize::HeatMapFrame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn baseline(cell: CellKind, layers: usize, channels: usize) -> BaselineConfig {
    BaselineConfig {
        cell,
        layers,
        channels,
        ..BaselineConfig::default()
    }
}

fn count(cell: CellKind, layers: usize, channels: usize) -> usize {
    build_baseline(baseline(cell, layers, channels), 0)
        .unwrap()
        .count_parameters()
}

#[test]
fn published_parameter_counts() {
    let table2: Vec<usize> = (1..=5).map(|l| count(CellKind::Rnn, l, 1)).collect();
    assert_eq!(table2, [649, 1825, 3001, 4177, 5353]);
    let expect = [
        (CellKind::Rnn, [4177, 4201, 4225, 4249]),
        (CellKind::Gru, [12769, 12841, 12913, 12985]),
        (CellKind::Lstm, [16633, 16729, 16825, 16921]),
    ];
    for (cell, counts) in expect {
        let got: Vec<usize> = (1..=4).map(|c| count(cell, 4, c)).collect();
        assert_eq!(got, counts, "{cell:?}");
    }
}

#[test]
fn counts_equal_layer_closed_forms() {
    let models = [
        build_baseline(baseline(CellKind::Gru, 3, 2), 1).unwrap(),
        build_crnn(CrnnConfig::default(), None, 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::Cnn, 6, 6, 4), 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::ConvLstm, 6, 6, 4), 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::Nn, 6, 6, 4), 1).unwrap(),
    ];
    for m in &models {
        let closed: usize = m.layers.iter().map(|l| l.parameter_count()).sum();
        assert_eq!(m.count_parameters(), closed, "{}", m.arch.name());
    }
    let lstm = build_comparator(ComparatorConfig::new(ComparatorKind::Lstm, 6, 6, 4), 1).unwrap();
    assert_eq!(lstm.count_parameters(), 16633);
}

#[test]
fn crnn_reference_structure() {
    let m = build_crnn(CrnnConfig::default(), None, 3).unwrap();
    assert_eq!(m.trainable_layers(), 9);
    let penultimate = m.layers.iter().rfind(|l| l.name.ends_with("convlstm")).unwrap();
    assert_eq!(penultimate.filters, 20);
    assert_eq!(m.count_parameters(), 89_216);
    assert!(build_crnn(CrnnConfig::default(), Some(&[1.0; 10]), 3).is_err());
}

#[test]
fn invalid_layer_count_rejected() {
    assert!(build_baseline(baseline(CellKind::Rnn, 0, 1), 0).is_err());
    assert!(build_baseline(baseline(CellKind::Rnn, 6, 1), 0).is_err());
}

#[test]
fn same_seed_same_weights() {
    let a = build_crnn(CrnnConfig::default(), None, 42).unwrap();
    let b = build_crnn(CrnnConfig::default(), None, 42).unwrap();
    let c = build_crnn(CrnnConfig::default(), None, 43).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

fn zero_all(m: &mut Model) {
    for (_, t) in m.params.iter_mut() {
        t.data_mut().fill(0.0);
    }
}

#[test]
fn zero_weights_give_head_bias() {
    for cell in [CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
        let mut m = build_baseline(baseline(cell, 2, 1), 0).unwrap();
        zero_all(&mut m);
        m.params.get_mut("head/bias").unwrap().data_mut()[0] = 0.37;
        let window = vec![vec![5.0]; 24];
        assert_eq!(forward_baseline(&m, &window).unwrap(), 0.37);
    }
}

#[test]
fn wrong_window_length_is_an_error() {
    let m = build_baseline(BaselineConfig::default(), 0).unwrap();
    assert!(forward_baseline(&m, &vec![vec![1.0]; 23]).is_err());
    assert!(recursive_forecast(&m, &vec![vec![1.0]; 24], 0).is_err());
}

// ---- naive oracles -------------------------------------------------------

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x [in] * w [in, out] + b`.
fn affine(x: &[f64], w: &Tensor, b: Option<&[f64]>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b[j]);
            for (i, xi) in x.iter().enumerate().take(rows) {
                s += xi * w.data()[i * cols + j];
            }
            s
        })
        .collect()
}

fn naive_cell(m: &Model, layer: &str, cell: CellKind, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = |n: &str| m.params.get(&format!("{layer}/{n}")).unwrap();
    let (w, u, b) = (p("kernel"), p("recurrent"), p("bias"));
    let units = u.shape()[0];
    let mut h = vec![0.0; units];
    let mut c = vec![0.0; units];
    let mut out = Vec::new();
    for x in xs {
        let zx = affine(x, w, Some(b.data()));
        match cell {
            CellKind::Rnn => {
                let zh = affine(&h, u, None);
                h = (0..units).map(|j| (zx[j] + zh[j]).tanh()).collect();
            }
            CellKind::Lstm => {
                let zh = affine(&h, u, None);
                for j in 0..units {
                    let i = sigmoid(zx[j] + zh[j]);
                    let f = sigmoid(zx[units + j] + zh[units + j]);
                    let g = (zx[2 * units + j] + zh[2 * units + j]).tanh();
                    let o = sigmoid(zx[3 * units + j] + zh[3 * units + j]);
                    c[j] = f * c[j] + i * g;
                    h[j] = o * c[j].tanh();
                }
            }
            CellKind::Gru => {
                let zh = affine(&h, u, Some(p("bias_rec").data()));
                h = (0..units)
                    .map(|j| {
                        let z = sigmoid(zx[j] + zh[j]);
                        let r = sigmoid(zx[units + j] + zh[units + j]);
                        let n = (zx[2 * units + j] + r * zh[2 * units + j]).tanh();
                        z * h[j] + (1.0 - z) * n
                    })
                    .collect();
            }
        }
        out.push(h.clone());
    }
    out
}

fn randomize(m: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in m.params.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

#[test]
fn baseline_matches_manual_unroll() {
    for cell in [CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
        let cfg = BaselineConfig {
            cell,
            layers: 2,
            channels: 2,
            window: 3,
            ..BaselineConfig::default()
        };
        let mut m = build_baseline(cfg, 5).unwrap();
        randomize(&mut m, 6, 0.3);
        let window = vec![vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.3, 0.5]];
        let h0 = naive_cell(&m, "rec0", cell, &window);
        let h1 = naive_cell(&m, "rec1", cell, &h0);
        let expect = affine(
            h1.last().unwrap(),
            m.params.get("head/kernel").unwrap(),
            Some(m.params.get("head/bias").unwrap().data()),
        )[0];
        let got = forward_baseline(&m, &window).unwrap();
        assert!((got - expect).abs() < 1e-12, "{cell:?}: {got} vs {expect}");
    }
}

#[test]
fn recursive_forecast_is_shift_and_predict() {
    let cfg = BaselineConfig {
        cell: CellKind::Gru,
        layers: 2,
        channels: 2,
        window: 4,
        ..BaselineConfig::default()
    };
    let m = build_baseline(cfg, 9).unwrap();
    let window: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.2]).collect();
    let got = recursive_forecast(&m, &window, 3).unwrap();
    assert_eq!(got.len(), 3);
    let mut w = window.clone();
    for pred in &got {
        let p = forward_baseline(&m, &w).unwrap();
        assert_eq!(pred, &vec![p]);
        let neighbor = w.last().unwrap()[1];
        w.remove(0);
        w.push(vec![p, neighbor]);
    }
    assert_eq!(
        recursive_forecast(&m, &window, 1).unwrap()[0][0],
        forward_baseline(&m, &window).unwrap()
    );
}

#[test]
fn constant_fixed_point_stays_constant() {
    let mut m = build_baseline(baseline(CellKind::Lstm, 1, 1), 0).unwrap();
    zero_all(&mut m);
    m.params.get_mut("head/bias").unwrap().data_mut()[0] = 0.5;
    let window = vec![vec![0.5]; 24];
    let f = recursive_forecast(&m, &window, 7).unwrap();
    assert!(f.iter().all(|v| v == &vec![0.5]));
}

// ---- CRNN composition oracle ---------------------------------------------

/// Same-padded 2-D cross-correlation of `x [h, w, cin]`.
fn conv2d(x: &[f64], h: usize, w: usize, k: &Tensor, b: Option<&[f64]>) -> Vec<f64> {
    let s = k.shape();
    let (ks, cin, cout) = (s[0], s[2], s[3]);
    let pad = (ks / 2) as isize;
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for dy in 0..ks {
                    for dx in 0..ks {
                        let (yi, xi) = (y as isize + dy as isize - pad, xx as isize + dx as isize - pad);
                        if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x[((yi as usize) * w + xi as usize) * cin + c]
                                * k.data()[((dy * ks + dx) * cin + c) * cout + o];
                        }
                    }
                }
                out[(y * w + xx) * cout + o] = acc;
            }
        }
    }
    out
}

fn crnn_oracle(m: &Model, frames: &[Vec<f64>], rows: usize, cols: usize, cfg: &CrnnConfig) -> Vec<f64> {
    let p = |n: &str| m.params.get(n).unwrap();
    let px = rows * cols;
    let mut seq: Vec<Vec<f64>> = frames.to_vec();
    for blk in 0..cfg.blocks {
        let conv = format!("block{blk}/conv");
        seq = seq
            .iter()
            .map(|x| {
                conv2d(
                    x,
                    rows,
                    cols,
                    p(&format!("{conv}/kernel")),
                    Some(p(&format!("{conv}/bias")).data()),
                )
                .into_iter()
                .map(f64::tanh)
                .collect()
            })
            .collect();
        let cl = format!("block{blk}/convlstm");
        let u = p(&format!("{cl}/recurrent"));
        let f = u.shape()[2];
        let mut h = vec![0.0; px * f];
        let mut c = vec![0.0; px * f];
        let mut out = Vec::new();
        for x in &seq {
            let zx = conv2d(
                x,
                rows,
                cols,
                p(&format!("{cl}/kernel")),
                Some(p(&format!("{cl}/bias")).data()),
            );
            let zh = conv2d(&h, rows, cols, u, None);
            for q in 0..px {
                for j in 0..f {
                    let z = |g: usize| zx[q * 4 * f + g * f + j] + zh[q * 4 * f + g * f + j];
                    let (i, fg, gg, o) = (sigmoid(z(0)), sigmoid(z(1)), z(2).tanh(), sigmoid(z(3)));
                    c[q * f + j] = fg * c[q * f + j] + i * gg;
                    h[q * f + j] = o * c[q * f + j].tanh();
                }
            }
            out.push(h.clone());
        }
        seq = out;
    }
    let f = cfg.penultimate;
    let (gamma, beta) = (p("bn/gamma").data(), p("bn/beta").data());
    let mean = m.state.get("bn/moving_mean").unwrap().data();
    let var = m.state.get("bn/moving_var").unwrap().data();
    let geo = m.state.get("geography").unwrap().data();
    let cat: Vec<Vec<f64>> = seq
        .iter()
        .map(|x| {
            let mut v = Vec::with_capacity(px * (f + 1));
            for q in 0..px {
                for j in 0..f {
                    v.push(gamma[j] * (x[q * f + j] - mean[j]) / (var[j] + 1e-3).sqrt() + beta[j]);
                }
                v.push(geo[q]);
            }
            v
        })
        .collect();
    // causal 3x3x3: last output sees steps T-3..T-1
    let k = p("conv3d/kernel");
    let kt = k.shape()[0];
    let t_last = cat.len() - 1;
    let mut out = vec![p("conv3d/bias").data()[0]; px];
    for dt in 0..kt {
        let ti = t_last as isize + dt as isize - (kt as isize - 1);
        if ti < 0 {
            continue;
        }
        let slab = Tensor::new(
            &k.shape()[1..],
            k.data()[dt * 9 * (f + 1)..(dt + 1) * 9 * (f + 1)].to_vec(),
        )
        .unwrap();
        let part = conv2d(&cat[ti as usize], rows, cols, &slab, None);
        out.iter_mut().zip(part).for_each(|(o, v)| *o += v);
    }
    out.into_iter().map(sigmoid).collect()
}

#[test]
fn crnn_matches_manual_composition() {
    let cfg = CrnnConfig {
        rows: 8,
        cols: 8,
        window: 4,
        blocks: 4,
        filters: 4,
        penultimate: 5,
        kernel: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geo: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut m = build_crnn(cfg.clone(), Some(&geo), 12).unwrap();
    randomize(&mut m, 13, 0.4);
    for (name, t) in m.state.iter_mut() {
        if name.starts_with("bn/") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.2..1.2));
        }
    }
    let frames: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let expect = crnn_oracle(&m, &frames, 8, 8, &cfg);
    let hm: Vec<HeatMapFrame> = frames
        .iter()
        .enumerate()
        .map(|(i, v)| HeatMapFrame::from_values(8, 8, i as i64, v.clone()).unwrap())
        .collect();
    let refs: Vec<&HeatMapFrame> = hm.iter().collect();
    let got = forward_crnn(&m, &refs).unwrap();
    assert_eq!((got.rows, got.cols), (8, 8));
    let diff = got
        .values
        .iter()
        .zip(&expect)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(diff < 1e-12, "{diff}");
    assert!(got.values.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn crnn_rejects_unnormalized_frames() {
    let cfg = CrnnConfig {
        rows: 4,
        cols: 4,
        window: 2,
        filters: 2,
        penultimate: 2,
        ..CrnnConfig::default()
    };
    let m = build_crnn(cfg, None, 0).unwrap();
    let ok = HeatMapFrame::from_values(4, 4, 0, vec![0.5; 16]).unwrap();
    let bad = HeatMapFrame::from_values(4, 4, 1, vec![1.5; 16]).unwrap();
    assert!(forward_crnn(&m, &[&ok, &bad]).is_err());
    assert!(forward_crnn(&m, &[&ok, &ok]).is_ok());
}

#[test]
fn batch_packing_does_not_change_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = CrnnConfig {
        rows: 6,
        cols: 6,
        window: 3,
        filters: 3,
        penultimate: 4,
        ..CrnnConfig::default()
    };
    let models = [
        build_crnn(cfg, None, 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::Nn, 6, 6, 3), 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::Lstm, 6, 6, 3), 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::Cnn, 6, 6, 3), 1).unwrap(),
        build_comparator(ComparatorConfig::new(ComparatorKind::ConvLstm, 6, 6, 3), 1).unwrap(),
    ];
    let windows: Vec<Vec<Vec<f64>>> = (0..11)
        .map(|_| {
            (0..3)
                .map(|_| (0..36).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect()
        })
        .collect();
    let refs: Vec<&[Vec<f64>]> = windows.iter().map(Vec::as_slice).collect();
    for m in &models {
        let together = m.predict(&refs).unwrap();
        for (w, t) in refs.iter().zip(&together) {
            let alone = m.predict(&[w]).unwrap().remove(0);
            let d = alone.iter().zip(t).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(d <= 1e-12, "{}: {d}", m.arch.name());
        }
    }
}

#[test]
fn model_file_round_trip() {
    let mut m = build_baseline(baseline(CellKind::Gru, 2, 3), 4).unwrap();
    m.meta.theta_max = 123.25;
    m.meta.config.push(("train.epochs".into(), "5".into()));
    let bytes = m.to_bytes();
    assert_eq!(&bytes[..6], b"CRNNW1");
    assert_eq!(Model::from_bytes(&bytes).unwrap(), m);

    let c = build_crnn(
        CrnnConfig {
            rows: 5,
            cols: 4,
            window: 2,
            filters: 2,
            penultimate: 3,
            ..CrnnConfig::default()
        },
        Some(&[0.5; 20]),
        1,
    )
    .unwrap();
    assert_eq!(Model::from_bytes(&c.to_bytes()).unwrap(), c);

    let mut corrupt = bytes.clone();
    corrupt[20] ^= 0xff;
    assert!(Model::from_bytes(&corrupt).is_err());
}

#[test]
fn sigmoid_output_option() {
    let cfg = BaselineConfig {
        output: Activation::Sigmoid,
        ..BaselineConfig::default()
    };
    let m = build_baseline(cfg, 0).unwrap();
    let v = forward_baseline(&m, &vec![vec![3.0]; 24]).unwrap();
    assert!(v > 0.0 && v < 1.0);
}
