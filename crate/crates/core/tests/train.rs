use std::fs;

use gdc_core::check::check_gradients;
use gdc_core::data::dataset::{Dataset, Split, SynthConfig};
use gdc_core::error::ErrorCategory;
use gdc_core::metrics::MetricReport;
use gdc_core::network::{FusionScheme, Model, NetConfig};
use gdc_core::tensor::checkpoint::Checkpoint;
use gdc_core::tensor::params::{ParamKind, ParamStore};
use gdc_core::tensor::{Graph, Tensor};
use gdc_core::train::{
    batch_indices, masked_mse_loss, run_ablation, train, Adam, AdamConfig, LossMode, TrainConfig,
};

fn row(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
}

fn loss_of(pred: &[f64], gt: &[f64], mask: &[bool], mode: LossMode) -> f64 {
    let mut g = Graph::new();
    let p = g.leaf(row(pred), true);
    let l = masked_mse_loss(&mut g, p, &row(gt), mask, mode).unwrap();
    g.scalar(l)
}

#[test]
fn masked_loss_arithmetic() {
    assert_eq!(loss_of(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[true; 3], LossMode::Sum), 0.0);
    assert_eq!(loss_of(&[1.0, 1.0, 5.0], &[1.0, 2.0, 3.0], &[true; 3], LossMode::Sum), 5.0);
    assert!((loss_of(&[1.0, 1.0, 5.0], &[1.0, 2.0, 3.0], &[true; 3], LossMode::Mean) - 5.0 / 3.0).abs() < 1e-15);
    assert_eq!(loss_of(&[1.0, 1.0, 5.0], &[1.0, 2.0, 3.0], &[true, false, true], LossMode::Sum), 4.0);
    let mut g = Graph::new();
    let p = g.leaf(row(&[1.0]), true);
    let err = masked_mse_loss(&mut g, p, &row(&[1.0]), &[false], LossMode::Sum).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Usage);
}

#[test]
fn loss_gradient_is_twice_the_masked_error() {
    let pred = [0.5, -1.0, 2.0, 4.0, 3.5];
    let gt = [1.0, 1.0, 1.0, 5.0, 2.0];
    let mask = [true, false, true, true, false];
    let mut g = Graph::new();
    let p = g.leaf(row(&pred), true);
    let l = masked_mse_loss(&mut g, p, &row(&gt), &mask, LossMode::Sum).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(p).unwrap().data().to_vec();
    for i in 0..5 {
        let expect = if mask[i] { 2.0 * (pred[i] - gt[i]) } else { 0.0 };
        assert_eq!(grad[i], expect);
    }
    let target = row(&gt);
    let outcome = check_gradients(
        &[row(&pred)],
        |g, v| masked_mse_loss(g, v[0], &target, &mask, LossMode::Sum),
        3,
    )
    .unwrap();
    assert!(outcome.passes(1e-6), "{outcome:?}");
    // Off-mask perturbations leave the loss unchanged.
    let mut moved = pred;
    moved[1] += 10.0;
    moved[4] -= 3.0;
    assert_eq!(loss_of(&moved, &gt, &mask, LossMode::Sum), loss_of(&pred, &gt, &mask, LossMode::Sum));
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::scalar(v), ParamKind::Trainable);
    s.add("buf", Tensor::scalar(7.0), ParamKind::Buffer);
    s
}

#[test]
fn adam_first_step_is_unit_scaled() {
    let mut params = scalar_store(0.0);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(&params, cfg);
    assert!(adam.step(&mut params, &[Some(Tensor::scalar(1.0)), None], 0.1).unwrap());
    // m = 0.1, v = 0.001; bias correction restores 1 and 1.
    let expect = -0.1 / (1.0 + 1e-8);
    assert!((params.entries()[0].value.data()[0] - expect).abs() < 1e-15);
    assert_eq!(params.entries()[1].value.data()[0], 7.0);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut params = scalar_store(1.5);
    let mut adam = Adam::new(
        &params,
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    for _ in 0..5 {
        adam.step(&mut params, &[Some(Tensor::scalar(0.0)), None], 0.1).unwrap();
    }
    assert_eq!(params.entries()[0].value.data()[0], 1.5);
}

#[test]
fn adam_skips_non_finite_gradients() {
    let mut params = scalar_store(1.5);
    let mut adam = Adam::new(&params, AdamConfig::default());
    assert!(!adam.step(&mut params, &[Some(Tensor::scalar(f64::NAN)), None], 0.1).unwrap());
    assert_eq!((adam.steps, adam.skipped), (0, 1));
    assert_eq!(params.entries()[0].value.data()[0], 1.5);
}

fn tiny_data(train_count: usize) -> (Dataset, Dataset) {
    let cfg = SynthConfig {
        seed: 3,
        train_count,
        val_count: 2,
        height: 16,
        width: 32,
        points: (30, 50),
    };
    (
        Dataset::synthetic(&cfg, Split::Train).unwrap(),
        Dataset::synthetic(&cfg, Split::Val).unwrap(),
    )
}

fn tiny_net(fusion: FusionScheme) -> NetConfig {
    NetConfig {
        stage_count: 2,
        channels: vec![4, 8],
        fusion,
        input_height: 16,
        input_width: 32,
        ..NetConfig::default()
    }
}

fn tiny_cfg(iters: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_iters: iters,
        lr_period: 5,
        seed: 9,
        checkpoint_every: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (tr, va) = tiny_data(4);
    let run = || {
        let mut m = Model::<f32>::build(tiny_net(FusionScheme::DeGuided), 1).unwrap();
        let out = train(&mut m, &tr, Some(&va), &tiny_cfg(6), None, &[]).unwrap();
        (out, m.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.losses[5].lr, 5e-4);
}

#[test]
fn zero_rates_leave_weights_fixed() {
    let (tr, _) = tiny_data(3);
    let mut m = Model::<f32>::build(tiny_net(FusionScheme::Concat), 2).unwrap();
    let before = m.params().clone();
    let cfg = TrainConfig {
        lr0: 0.0,
        weight_decay: 0.0,
        ..tiny_cfg(3)
    };
    train(&mut m, &tr, None, &cfg, None, &[]).unwrap();
    for id in before.trainable_ids() {
        assert_eq!(before.get(id), m.params().get(id), "{}", before.entry(id).name);
    }
}

#[test]
fn first_logged_loss_is_the_untrained_forward_loss() {
    let (tr, _) = tiny_data(4);
    let cfg = tiny_cfg(1);
    let mut m = Model::<f32>::build(tiny_net(FusionScheme::Add), 3).unwrap();
    let fresh = m.clone();
    let out = train(&mut m, &tr, None, &cfg, None, &[]).unwrap();
    let idx = batch_indices(tr.len(), cfg.batch_size, cfg.seed, 0);
    let samples: Vec<_> = idx.iter().map(|&i| &tr.samples[i]).collect();
    let batch = gdc_core::data::Batch::<f32>::from_samples(&samples).unwrap();
    let mut g = Graph::new();
    let i = g.constant(batch.image);
    let s = g.constant(batch.sparse);
    let f = fresh.forward(&mut g, i, s, true).unwrap();
    let l = masked_mse_loss(&mut g, f.depth, &batch.gt, &batch.mask, cfg.loss_mode).unwrap();
    assert_eq!(out.losses[0].loss, g.scalar(l) as f64);
}

#[test]
fn run_directory_layout() {
    let (tr, va) = tiny_data(3);
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::build(tiny_net(FusionScheme::DeGuided), 4).unwrap();
    let header = [("version".to_string(), "test".to_string())];
    let out = train(&mut m, &tr, Some(&va), &tiny_cfg(9), Some(dir.path()), &header).unwrap();
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,loss,lr");
    assert_eq!(lines.len(), 10);
    assert!(lines[6].starts_with("5,") && lines[6].ends_with(",0.0005"));
    let config = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(config.starts_with("version=test\n"));
    assert!(config.contains("loss_mode=mean") && config.contains("config_hash="));
    for n in [4, 8, 9] {
        assert!(dir.path().join(format!("checkpoints/iter_{n}.gdc1")).exists(), "iter {n}");
    }
    let report = MetricReport::from_kv(&fs::read_to_string(dir.path().join("metrics_val.txt")).unwrap()).unwrap();
    assert_eq!(Some(report), out.val);
    // The final checkpoint reproduces the trained model exactly.
    let loaded = Model::<f32>::from_checkpoint(&Checkpoint::load(&dir.path().join("checkpoints/iter_9.gdc1")).unwrap()).unwrap();
    let s = &va.samples[0];
    let (img, sp) = (s.image.to_tensor(), s.sparse.to_tensor());
    assert_eq!(loaded.predict(&img, &sp).unwrap(), m.predict(&img, &sp).unwrap());
}

#[test]
fn non_finite_loss_aborts() {
    let (tr, _) = tiny_data(2);
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::build(tiny_net(FusionScheme::Add), 5).unwrap();
    train(&mut m, &tr, None, &tiny_cfg(4), Some(dir.path()), &[]).unwrap();
    let kept = dir.path().join("checkpoints/iter_4.gdc1");
    let before = fs::read(&kept).unwrap();
    m.params_mut()
        .map_values(|e| if e.name == "depth.out.b" { Tensor::full(e.value.shape(), f32::NAN) } else { e.value.clone() });
    let err = train(&mut m, &tr, None, &tiny_cfg(4), Some(dir.path()), &[]).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Numeric);
    assert_eq!(fs::read(&kept).unwrap(), before);
}

#[test]
fn ablation_rows_are_deterministic() {
    let (tr, va) = tiny_data(3);
    let cfg = tiny_cfg(3);
    let de = FusionScheme::DeGuided;
    let t = run_ablation::<f32>(&[de, de], &tiny_net(de), &cfg, &[0], &tr, &va, None).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows[0], t.rows[1]);
    let schemes = [FusionScheme::DeGuided, FusionScheme::Add, FusionScheme::Concat];
    let t = run_ablation::<f32>(&schemes, &tiny_net(de), &cfg, &[0, 1], &tr, &va, None).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert!(t.rows.windows(2).all(|w| w[0].mean.rmse_mm <= w[1].mean.rmse_mm));
    assert_eq!(t.csv().lines().count(), 1 + 3 * 3);
    assert!(run_ablation::<f32>(&[de], &tiny_net(de), &cfg, &[0], &tr, &va, None).is_err());
}
