mod common;

use topocnn::data::AugmentConfig;
use topocnn::models::{Attachment, ModelSpec};
use topocnn::pruning::{apply_prune, prune_layers, PruneOptions};
use topocnn::trainer::{evaluate, train, TrainConfig};
use topocnn::Model;

fn small_vgg(attachment: Attachment) -> ModelSpec {
    ModelSpec::small_vgg(3, 16, 10).with_widths(vec![8, 16]).with_attachment(attachment)
}

fn cfg(lambda: f64, epochs: usize) -> TrainConfig {
    TrainConfig { lambda, epochs, batch_size: 32, ..Default::default() }
}

#[test]
fn lambda_zero_matches_baseline_bit_for_bit() {
    let splits = common::tiny_splits(3, 16, 400, 160, 40);
    let run = |attachment| {
        let model = Model::<f32>::new(small_vgg(attachment), 11).unwrap();
        train(model, &splits, &cfg(0.0, 2), &mut |_| {}).unwrap()
    };
    let topo = run(Attachment::Default);
    let base = run(Attachment::None);
    assert_eq!(
        serde_json::to_string(&topo.state.history).unwrap(),
        serde_json::to_string(&base.state.history).unwrap()
    );
    for (a, b) in topo.state.model.params().iter().zip(base.state.model.params()) {
        let bits = |t: &topocnn::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn runs_are_reproducible_and_snapshot_is_best() {
    let splits = common::tiny_splits(3, 16, 400, 160, 40);
    let run = || {
        let model = Model::<f32>::new(small_vgg(Attachment::Default), 3).unwrap();
        train(model, &splits, &cfg(1.0, 3), &mut |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.state.history, b.state.history);
    let best = a.state.best.as_ref().unwrap();
    let max = a.state.history.iter().map(|m| m.val_acc).fold(f64::MIN, f64::max);
    assert_eq!(best.val_acc, max);
    let first_max = a.state.history.iter().find(|m| m.val_acc == max).unwrap().epoch;
    assert_eq!(best.epoch, first_max);
    let again = evaluate(&best.model, &splits.val, 32).unwrap().accuracy;
    assert_eq!(again, best.val_acc);
}

#[test]
fn divergence_stops_with_last_good_state() {
    let splits = common::tiny_splits(3, 16, 200, 100, 20);
    let model = Model::<f32>::new(small_vgg(Attachment::Default), 0).unwrap();
    let c = TrainConfig { lr0: 1e30, warmup_fraction: 0.0, ..cfg(0.0, 3) };
    let out = train(model, &splits, &c, &mut |_| {}).unwrap();
    assert!(out.diverged.is_some());
    assert!(out.state.model.params().iter().all(|p| p.value.all_finite()));
}

#[test]
fn rejects_topography_without_layers() {
    let splits = common::tiny_splits(3, 16, 200, 100, 20);
    let model = Model::<f32>::new(small_vgg(Attachment::None), 0).unwrap();
    assert!(train(model, &splits, &cfg(1.0, 1), &mut |_| {}).is_err());
}

// Digit-sized smoke run (1×28×28, 512 training images, 2 epochs). The real
// MNIST files are not assumed to be present, so the synthetic stand-in is used.
#[test]
fn smoke_run_learns() {
    let splits = common::tiny_splits(1, 28, 1000, 512, 100);
    let model = Model::<f32>::new(ModelSpec::small_vgg(1, 28, 10), 0).unwrap();
    let c = TrainConfig { epochs: 2, batch_size: 32, augment: Some(AugmentConfig { pad: 4, flip: false }), ..Default::default() };
    let out = train(model, &splits, &c, &mut |_| {}).unwrap();
    let last = out.state.history.last().unwrap();
    assert!(last.train_acc > 0.8, "{:?}", out.state.history);
}

#[test]
fn topographic_pressure_lowers_layer_losses() {
    let splits = common::tiny_splits(3, 16, 600, 320, 60);
    let model = Model::<f32>::new(small_vgg(Attachment::Default), 0).unwrap();
    let out = train(model, &splits, &TrainConfig { lambda: 1.0, epochs: 4, batch_size: 32, ..Default::default() }, &mut |_| {}).unwrap();
    let h = &out.state.history;
    let best = out.state.best.as_ref().unwrap().epoch;
    for (id, first) in &h[0].topo_loss_per_layer {
        let later = h[best - 1].topo_loss_per_layer[id];
        assert!(later < *first, "{id}: epoch 1 {first} vs best epoch {best} {later}");
    }
}

#[test]
fn heavy_pruning_collapses_accuracy() {
    let splits = common::tiny_splits(3, 16, 600, 320, 60);
    let model = Model::<f32>::new(small_vgg(Attachment::Default), 0).unwrap();
    let cfg = TrainConfig { epochs: 6, batch_size: 32, lr0: 0.05, augment: None, ..Default::default() };
    let out = train(model, &splits, &cfg, &mut |_| {}).unwrap();
    let model = out.state.best_model();
    let full = evaluate(model, &splits.test, 64).unwrap().accuracy;
    let (pruned, _) = apply_prune(model, 0.99, &prune_layers(model), PruneOptions::default()).unwrap();
    let acc = evaluate(&pruned, &splits.test, 64).unwrap().accuracy;
    assert!(full > 0.5, "{full}");
    assert!(acc <= 0.15, "{acc}");
}
