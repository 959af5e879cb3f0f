use gdc_core::network::{verify_decoder_to_encoder, FusionOp, FusionScheme, Model, NetConfig};
use gdc_core::rng::stream;
use gdc_core::tensor::checkpoint::Checkpoint;
use gdc_core::tensor::{Graph, Tensor};
use rand::Rng;

fn small(fusion: FusionScheme) -> NetConfig {
    NetConfig {
        stage_count: 2,
        channels: vec![4, 8],
        fusion,
        input_height: 16,
        input_width: 16,
        ..NetConfig::default()
    }
}

fn inputs(n: usize, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = stream(seed, "net-inputs");
    let img = Tensor::from_fn([n, 3, h, w], |_| rng.random_range(0.0..1.0));
    let sparse = Tensor::from_fn([n, 1, h, w], |_| {
        if rng.random_bool(0.1) {
            rng.random_range(1.0..20.0)
        } else {
            0.0
        }
    });
    (img, sparse)
}

// Independent closed-form parameter arithmetic.
fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + 2 * cout
}

fn res(cin: usize, cout: usize, stride: usize) -> usize {
    conv_bn(cin, cout, 3) + conv_bn(cout, cout, 3) + if cin != cout || stride != 1 { conv_bn(cin, cout, 1) } else { 0 }
}

fn up(cin: usize, cout: usize) -> usize {
    cin * cout * 9 + 2 * cout
}

fn fusion(op: FusionOp, c: usize, k: usize) -> usize {
    match op {
        FusionOp::Guided => (c * k * k) * c * 9 + c * k * k + (c * c) * c + c * c + 2 * c,
        FusionOp::Add => 2 * c,
        FusionOp::Concat => 2 * c * c + 2 * c,
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for scheme in FusionScheme::ALL {
        let cfg = small(scheme);
        let model = Model::<f32>::build(cfg.clone(), 0).unwrap();
        // levels: 0 -> 4, 1 -> 4, 2 -> 8
        let mut expect = conv_bn(3, 4, 3) + res(4, 4, 2) + res(4, 8, 2);
        if scheme != FusionScheme::EeGuided {
            expect += res(8, 8, 1) + up(8, 4);
        }
        expect += conv_bn(1, 4, 3) + res(4, 4, 2) + res(4, 8, 2);
        expect += fusion(scheme.operator(1, 2), 4, 3) + fusion(scheme.operator(2, 2), 8, 3);
        expect += res(8, 8, 1) + up(8, 4) + up(4, 4);
        expect += 4 * 9 + 1;
        assert_eq!(model.trainable_count(), expect, "{scheme}");
    }
}

#[test]
fn ee_has_fewer_parameters_than_de() {
    let cfg = NetConfig::default();
    let de = Model::<f32>::build(cfg.clone(), 0).unwrap();
    let ee = Model::<f32>::build(
        NetConfig {
            fusion: FusionScheme::EeGuided,
            ..cfg
        },
        0,
    )
    .unwrap();
    assert!(ee.trainable_count() < de.trainable_count());
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f32>::build(small(FusionScheme::DeGuided), 42).unwrap();
    let b = Model::<f32>::build(small(FusionScheme::DeGuided), 42).unwrap();
    let c = Model::<f32>::build(small(FusionScheme::DeGuided), 43).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn indivisible_resolution_rejected() {
    let cfg = NetConfig {
        input_width: 18,
        ..small(FusionScheme::Add)
    };
    assert!(Model::<f32>::build(cfg, 0).is_err());
    let model = Model::<f32>::build(small(FusionScheme::Add), 0).unwrap();
    let (img, sparse) = inputs(1, 18, 16, 0);
    assert!(model.predict(&img, &sparse).is_err());
}

#[test]
fn mismatched_inputs_rejected() {
    let model = Model::<f32>::build(small(FusionScheme::Add), 0).unwrap();
    let (img, _) = inputs(1, 16, 16, 0);
    let (_, sparse) = inputs(1, 16, 32, 0);
    let err = model.predict(&img, &sparse).unwrap_err();
    assert!(err.to_string().contains("shape mismatch"), "{err}");
}

#[test]
fn zero_parameters_give_zero_output() {
    let mut model = Model::<f32>::build(small(FusionScheme::DeGuided), 1).unwrap();
    model
        .params_mut()
        .map_values(|e| if e.name.ends_with("running_var") { e.value.clone() } else { Tensor::zeros(e.value.shape()) });
    let (img, sparse) = inputs(1, 16, 16, 1);
    let out = model.predict(&img, &sparse).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_batch_gives_identical_outputs_in_eval() {
    let model = Model::<f32>::build(small(FusionScheme::DeGuided), 2).unwrap();
    let (img, sparse) = inputs(1, 16, 16, 2);
    let img2 = Tensor::stack(&[&img, &img]).unwrap();
    let sp2 = Tensor::stack(&[&sparse, &sparse]).unwrap();
    let out = model.predict(&img2, &sp2).unwrap();
    assert_eq!(out.item(0), out.item(1));
    assert_eq!(out.item(0), model.predict(&img, &sparse).unwrap().data());
}

#[test]
fn all_schemes_forward_backward_at_64() {
    let (img, sparse) = inputs(1, 64, 64, 3);
    for scheme in FusionScheme::ALL {
        let cfg = NetConfig {
            channels: vec![8, 16, 32],
            fusion: scheme,
            input_height: 64,
            input_width: 64,
            ..NetConfig::default()
        };
        let model = Model::<f32>::build(cfg, 4).unwrap();
        let mut g = Graph::new();
        let i = g.constant(img.clone());
        let s = g.constant(sparse.clone());
        let out = model.forward(&mut g, i, s, true).unwrap();
        assert_eq!(g.shape(out.depth).0, [1, 1, 64, 64]);
        assert!(g.value(out.depth).all_finite());
        let loss = g.sum(out.depth);
        g.backward(loss).unwrap();
        for id in model.params().trainable_ids() {
            let grad = g.grad(out.params[id.index()]).unwrap_or_else(|| panic!("{scheme}: no gradient"));
            assert!(grad.all_finite(), "{scheme} {}", model.params().entry(id).name);
        }
        let nonzero = model
            .params()
            .trainable_ids()
            .filter(|id| g.grad(out.params[id.index()]).unwrap().max_abs() > 0.0)
            .count();
        assert!(nonzero > 0);
    }
}

#[test]
fn every_parameter_receives_gradient_under_de() {
    let cfg = NetConfig {
        channels: vec![8, 16, 32],
        input_height: 64,
        input_width: 64,
        ..NetConfig::default()
    };
    let model = Model::<f32>::build(cfg, 5).unwrap();
    let (img, sparse) = inputs(1, 64, 64, 5);
    let mut g = Graph::new();
    let i = g.constant(img);
    let s = g.constant(sparse);
    let out = model.forward(&mut g, i, s, true).unwrap();
    let sq = g.mul(out.depth, out.depth).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    for id in model.params().trainable_ids() {
        let name = &model.params().entry(id).name;
        let grad = g.grad(out.params[id.index()]).unwrap();
        assert!(grad.max_abs() > 0.0, "{name} has an all-zero gradient");
    }
}

#[test]
fn de_topology_holds_and_others_fail_it() {
    let cfg = NetConfig {
        channels: vec![8, 16, 32],
        input_height: 64,
        input_width: 64,
        ..NetConfig::default()
    };
    let (img, sparse) = inputs(1, 64, 64, 6);
    for scheme in FusionScheme::ALL {
        let model = Model::<f32>::build(
            NetConfig {
                fusion: scheme,
                ..cfg.clone()
            },
            6,
        )
        .unwrap();
        let mut g = Graph::new();
        let i = g.constant(img.clone());
        let s = g.constant(sparse.clone());
        let out = model.forward(&mut g, i, s, false).unwrap();
        let verdict = verify_decoder_to_encoder(&g, &out.trace, 3);
        assert_eq!(verdict.is_ok(), scheme == FusionScheme::DeGuided, "{scheme}: {verdict:?}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let mut model = Model::<f32>::build(small(FusionScheme::Concat), 7).unwrap();
    let (img, sparse) = inputs(2, 16, 16, 7);
    // Move the running statistics away from their initial values.
    let mut g = Graph::new();
    let i = g.constant(img.clone());
    let s = g.constant(sparse.clone());
    let out = model.forward(&mut g, i, s, true).unwrap();
    model.update_running_stats(&out.bn_stats);
    let before = model.predict(&img, &sparse).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gdc1");
    model.to_checkpoint().save(&path).unwrap();
    let loaded = Model::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.predict(&img, &sparse).unwrap(), before);
}
