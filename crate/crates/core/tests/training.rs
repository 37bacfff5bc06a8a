//! Optimizer, schedule and end-to-end training-loop behavior.

mod common;

use common::noise;
use glfcr::checkpoint;
use glfcr::data::{self, SceneTriplet, SynthConfig};
use glfcr::params::Init;
use glfcr::training::{fit, read_trace, Adam, RunPaths, TrainConfig, Trainer};
use glfcr::{GlfcrModel, ModelConfig, ParamStore, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 8,
        blocks: 1,
        dense: 2,
        heads: 2,
        ..ModelConfig::desk()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 2,
        crop: 16,
        samples_per_epoch: Some(4),
        seed: 9,
        ..TrainConfig::desk()
    }
}

fn scenes<T: glfcr::Element>(n: u64) -> Vec<SceneTriplet<T>> {
    let cfg = SynthConfig {
        height: 24,
        width: 24,
        seed: 5,
        ..SynthConfig::default()
    };
    (0..n).map(|i| data::synth_scene_at(&cfg, i).unwrap()).collect()
}

fn values<T: glfcr::Element>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

#[test]
fn adam_matches_a_hand_computed_two_step_trace() {
    let mut store = ParamStore::<f64>::new(0);
    store.add("w", vec![4], Init::Const(0.0)).unwrap();
    let start = noise(vec![4], 1);
    store.set("w", start.clone()).unwrap();
    let grads = [noise(vec![4], 2), noise(vec![4], 3).map(|g| 1e-3 * g)];
    let lrs = [1e-2, 5e-3];

    let mut adam = Adam::new(&store);
    for (g, &lr) in grads.iter().zip(&lrs) {
        store.iter_mut().next().unwrap().1.grad = g.clone();
        adam.step(&mut store, lr).unwrap();
        assert!(store.iter().all(|(_, p)| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..4 {
        let (g1, g2) = (grads[0].data()[i], grads[1].data()[i]);
        let (m1, v1) = ((1.0 - b1) * g1, (1.0 - b2) * g1 * g1);
        let w1 = start.data()[i] - lrs[0] * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let (m2, v2) = (b1 * m1 + (1.0 - b1) * g2, b2 * v1 + (1.0 - b2) * g2 * g2);
        let w2 = w1 - lrs[1] * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        let got = store.by_name("w").unwrap().value.data()[i];
        assert!((got - w2).abs() <= 1e-15, "coordinate {i}: {got} vs {w2}");
    }
    assert_eq!(adam.step, 2);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let model = GlfcrModel::<f32>::new(tiny(), 2).unwrap();
    let before = values(&model.params);
    let mut trainer = Trainer::new(model, TrainConfig { lr0: 0.0, ..quick(1) }).unwrap();
    let rows = fit(&mut trainer, &scenes(3), None).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(values(&trainer.model.params), before);
}

#[test]
fn loss_is_finite_on_default_synthetic_scenes() {
    let scenes: Vec<SceneTriplet<f32>> = (0..2).map(|i| data::synth_scene_at(&SynthConfig::default(), i).unwrap()).collect();
    let model = GlfcrModel::<f32>::new(tiny(), 0).unwrap();
    let cfg = TrainConfig { crop: 32, ..quick(1) };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let rows = fit(&mut trainer, &scenes, None).unwrap();
    assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    assert!(trainer.model.params.iter().all(|(_, p)| p.value.all_finite()));
}

#[test]
fn strict_runs_are_reproducible() {
    let run = || {
        let mut t = Trainer::new(GlfcrModel::<f64>::new(tiny(), 4).unwrap(), quick(2)).unwrap();
        let rows = fit(&mut t, &scenes(3), None).unwrap();
        (rows, values(&t.model.params), t.adam)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.len(), 4);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let data = scenes::<f64>(3);
    let full_dir = tempfile::tempdir().unwrap();
    let full = RunPaths::new(full_dir.path());
    let mut t = Trainer::new(GlfcrModel::<f64>::new(tiny(), 4).unwrap(), quick(3)).unwrap();
    fit(&mut t, &data, Some(&full)).unwrap();

    // Resume from the first epoch in a copy whose trace ran past it.
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = RunPaths::new(resumed_dir.path());
    std::fs::copy(full.trace(), resumed.trace()).unwrap();
    let mut r: Trainer<f64> = checkpoint::load(&full.checkpoint(1)).unwrap().trainer(None).unwrap();
    assert_eq!((r.epoch, r.step), (1, 2));
    let rows = fit(&mut r, &data, Some(&resumed)).unwrap();
    assert_eq!(rows.len(), 4);

    assert_eq!(std::fs::read(full.trace()).unwrap(), std::fs::read(resumed.trace()).unwrap());
    assert_eq!(read_trace(&resumed.trace()).unwrap().len(), 6);
    assert_eq!(values(&r.model.params), values(&t.model.params));
    assert_eq!(r.adam, t.adam);
    let (a, b) = (checkpoint::load(&full.last()).unwrap(), checkpoint::load(&resumed.last()).unwrap());
    assert_eq!(a.entries, b.entries);
}
