use plumecast::autodiff::{Graph, Params, Tensor};
use plumecast::models::{build_comparator, ComparatorConfig, ComparatorKind, Model};
use plumecast::optimize::{adadelta_step, train, AdadeltaState, TrainConfig};
use plumecast::Error;

/// Moving-bump sequences on a 3x3 grid: each sample is `window + 1` frames.
fn bump_samples(n: usize, window: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|s| {
            (0..=window)
                .map(|t| {
                    let at = (s + t) % 9;
                    (0..9).map(|i| if i == at { 0.9 } else { 0.1 }).collect()
                })
                .collect()
        })
        .collect()
}

fn small_model(seed: u64) -> Model {
    build_comparator(ComparatorConfig::new(ComparatorKind::Cnn, 3, 3, 3), seed).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn fifty_epochs_reduce_the_training_loss() {
    let mut m = small_model(1);
    let h = train(&mut m, &bump_samples(18, 3), &[], &config(50)).unwrap();
    assert_eq!(h.len(), 50);
    let first = h.epochs[0].train_loss;
    let last = h.epochs[49].train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let data = bump_samples(10, 3);
    let val = bump_samples(4, 3);
    let run = || {
        let mut m = small_model(2);
        let h = train(&mut m, &data, &val, &config(6)).unwrap();
        (h, m.to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn oversized_batch_is_a_single_short_batch() {
    let mut m = small_model(3);
    let cfg = TrainConfig {
        batch_size: 100,
        ..config(2)
    };
    let h = train(&mut m, &bump_samples(5, 3), &[], &cfg).unwrap();
    assert_eq!(h.len(), 2);
}

#[test]
fn history_rows_and_monotone_lr() {
    let mut m = small_model(4);
    let cfg = TrainConfig {
        patience: 1,
        ..config(12)
    };
    let h = train(&mut m, &bump_samples(6, 3), &bump_samples(3, 3), &cfg).unwrap();
    assert_eq!(h.len(), 12);
    assert!(h.epochs.windows(2).all(|w| w[1].lr_scale <= w[0].lr_scale));
    assert!(h.epochs.iter().all(|r| r.val_loss.is_some() && r.train_loss >= 0.0));
    assert_eq!(h.to_text().lines().count(), 13);
}

#[test]
fn empty_training_set_is_an_error() {
    let mut m = small_model(5);
    assert!(matches!(
        train(&mut m, &[], &[], &config(1)),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn non_finite_loss_reports_epoch_and_batch() {
    let mut m = small_model(6);
    let (name, t) = m.params.iter().next().map(|(k, v)| (k.clone(), v.clone())).unwrap();
    m.params.insert(name, t.map(|_| f64::NAN));
    match train(&mut m, &bump_samples(4, 3), &[], &config(1)) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 1, batch 1"), "{msg}"),
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn one_small_step_decreases_a_single_sample_loss() {
    // p = sigmoid(w * x + b) against y, two parameters.
    let (x, y) = (1.5, 1.0);
    let loss_of = |p: &Params| -> (f64, plumecast::autodiff::Gradients) {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let w = bound.var("w").unwrap();
        let b = bound.var("b").unwrap();
        let xs = g.input(Tensor::scalar(x));
        let wx = g.mul(w, xs).unwrap();
        let z = g.add(wx, b).unwrap();
        let p = g.sigmoid(z);
        let l = g.bce(p, Tensor::scalar(y)).unwrap();
        (g.value(l).item().unwrap(), g.backward(l).unwrap())
    };
    let mut p: Params = [("w", Tensor::scalar(-0.3)), ("b", Tensor::scalar(0.2))]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let (before, grads) = loss_of(&p);
    let mut state = AdadeltaState::new(&p, 1e-3);
    adadelta_step(&mut p, &grads, &mut state).unwrap();
    let (after, _) = loss_of(&p);
    assert!(after < before, "{before} -> {after}");
}
