mod support;

use lesiondet::autodiff::{PlateauSchedule, SgdMomentum, Shape, Tensor};
use lesiondet::training::{train, TrainOptions, TrainPaths};
use support::fixtures::{small_config, small_dataset};

#[test]
fn plateau_halves_on_the_fifth_flat_epoch() {
    let mut s = PlateauSchedule::new(0.005, 0.5, 5).unwrap();
    assert_eq!(s.update(0.9), 0.005);
    assert_eq!(s.update(0.8), 0.005);
    for _ in 0..4 {
        assert_eq!(s.update(0.85), 0.005);
    }
    assert_eq!(s.update(0.8), 0.0025);
    for _ in 0..4 {
        assert_eq!(s.update(0.8), 0.0025);
    }
    assert_eq!(s.update(0.81), 0.00125);
}

#[test]
fn momentum_two_step_values() {
    let mut opt = SgdMomentum::new(0.5f64, 0.5, [Shape::new(1, 1, 1, 1)]).unwrap();
    let mut p = vec![Tensor::scalar(4.0)];
    // v = 1, p = 4 - 0.5
    opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
    assert_eq!(p[0].data()[0], 3.5);
    // v = 0.5 + 2 = 2.5, p = 3.5 - 1.25
    opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
    assert_eq!(p[0].data()[0], 2.25);
    assert_eq!(opt.velocity()[0].data()[0], 2.5);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(3);
    cfg.training.max_epochs = 4;
    let (tr, va) = small_dataset(&dir.path().join("data"), 10, &cfg);
    let full = TrainPaths::for_model(&dir.path().join("full.ckpt"));
    let split = TrainPaths::for_model(&dir.path().join("split.ckpt"));
    train(&tr, &va, &cfg, &full, &TrainOptions::default()).unwrap();
    let interrupted = TrainOptions {
        resume: false,
        stop_after: Some(2),
    };
    assert_eq!(train(&tr, &va, &cfg, &split, &interrupted).unwrap().history.len(), 2);
    let resumed = TrainOptions {
        resume: true,
        stop_after: None,
    };
    assert_eq!(train(&tr, &va, &cfg, &split, &resumed).unwrap().history.len(), 4);
    assert_eq!(std::fs::read(&full.log).unwrap(), std::fs::read(&split.log).unwrap());
    assert_eq!(std::fs::read(&full.model).unwrap(), std::fs::read(&split.model).unwrap());
    assert_eq!(std::fs::read(&full.last).unwrap(), std::fs::read(&split.last).unwrap());
}

#[test]
fn ten_exam_training_loss_halves() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.training.max_epochs = 20;
    let (tr, va) = small_dataset(dir.path(), 10, &cfg);
    let report = train(&tr, &va, &cfg, &TrainPaths::for_model(&dir.path().join("m.ckpt")), &TrainOptions::default()).unwrap();
    let first = report.history[0].train_loss;
    let best = report.history.iter().map(|r| r.train_loss).fold(f32::INFINITY, f32::min);
    assert!(best <= 0.5 * first, "train loss {first} -> {best}");
    for r in &report.history {
        assert!(r.lr == 0.005 || r.epoch > 5);
    }
}
