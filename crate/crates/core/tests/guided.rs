use gdc_core::guided::{
    channelwise_variant_conv, crosschannel_conv, naive_guided_conv, ChannelwiseKernels, CrossChannelKernels,
    FullVariantKernels, GuidedConv, GuidedParams,
};
use gdc_core::rng::stream;
use gdc_core::tensor::{ConvParams, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn rand_t(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    let mut rng = stream(seed, "guided-test");
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn at(t: &Tensor<f64>, b: usize, c: usize, y: isize, x: isize) -> f64 {
    let s = t.shape();
    if y < 0 || x < 0 || y >= s.h() as isize || x >= s.w() as isize {
        0.0
    } else {
        t.get([b, c, y as usize, x as usize])
    }
}

#[test]
fn channelwise_matches_per_pixel_loops() {
    let s = rand_t(1, [1, 2, 3, 3]);
    let kt = rand_t(2, [1, 18, 3, 3]);
    let k = ChannelwiseKernels::new(kt.clone(), 3).unwrap();
    let out = channelwise_variant_conv(&s, &k).unwrap();
    for m in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = kt.get([0, m * 9 + ky * 3 + kx, y, x]);
                        acc += w * at(&s, 0, m, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    }
                }
                assert!((out.get([0, m, y, x]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn crosschannel_matches_loops() {
    let d = rand_t(3, [2, 3, 2, 4]);
    let kt = rand_t(4, [2, 6, 1, 1]);
    let k = CrossChannelKernels::new(kt.clone(), 3, 2).unwrap();
    let out = crosschannel_conv(&d, &k).unwrap();
    for b in 0..2 {
        for n in 0..2 {
            for y in 0..2 {
                for x in 0..4 {
                    let acc: f64 = (0..3).map(|m| kt.get([b, m * 2 + n, 0, 0]) * d.get([b, m, y, x])).sum();
                    assert!((out.get([b, n, y, x]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn constant_kernels_equal_depthwise_conv2d() {
    let s = rand_t(5, [1, 2, 5, 4]);
    let base = rand_t(6, [2, 1, 3, 3]);
    let k = ChannelwiseKernels::from_fn(1, 2, 3, 5, 4, |_, m, k, _, _| base.get([m, 0, k / 3, k % 3])).unwrap();
    let out = channelwise_variant_conv(&s, &k).unwrap();
    for m in 0..2 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 1, 5, 4], |[_, _, y, xx]| s.get([0, m, y, xx])));
        let w = g.constant(Tensor::from_fn([1, 1, 3, 3], |[_, _, ky, kx]| base.get([m, 0, ky, kx])));
        let y = g.conv2d(x, w, None, ConvParams::same(3)).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            assert!((v - out.item(0)[m * 20 + i]).abs() < 1e-6);
        }
    }
}

fn module_params(g: &mut Graph<f64>, gc: &GuidedConv, seed: u64) -> GuidedParams {
    let [a, b, c, d] = gc.init_params::<f64, _>(&mut stream(seed, "module"));
    let mut rng = stream(seed, "bias");
    let b = b.map(|_| rng.random_range(-0.5..0.5));
    let d = d.map(|_| rng.random_range(-0.5..0.5));
    GuidedParams {
        kgl_weight: g.param(a),
        kgl_bias: Some(g.param(b)),
        fc_weight: g.param(c),
        fc_bias: Some(g.param(d)),
    }
}

#[test]
fn channelwise_generator_matches_convolution_loops() {
    let gc = GuidedConv::new(2, 2, 2, 3);
    let mut g = Graph::new();
    let img_t = rand_t(7, [1, 2, 4, 4]);
    let img = g.constant(img_t.clone());
    let p = module_params(&mut g, &gc, 8);
    let target = gdc_core::tensor::Shape::new(1, 2, 4, 4);
    let k = gc.generate_channelwise(&mut g, img, &p, target).unwrap();
    let w = g.value(p.kgl_weight).clone();
    let bias = g.value(p.kgl_bias.unwrap()).clone();
    assert_eq!(g.shape(k), gdc_core::tensor::Shape::new(1, 18, 4, 4));
    for o in 0..18 {
        for y in 0..4 {
            for x in 0..4 {
                let mut acc = bias.data()[o];
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += w.get([o, c, ky, kx])
                                * at(&img_t, 0, c, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        }
                    }
                }
                assert!((g.value(k).get([0, o, y, x]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn crosschannel_generator_is_mean_then_matmul() {
    let gc = GuidedConv::new(3, 2, 4, 3);
    let mut g = Graph::new();
    let img_t = rand_t(9, [2, 3, 3, 5]);
    let img = g.constant(img_t.clone());
    let p = module_params(&mut g, &gc, 10);
    let k = gc.generate_crosschannel(&mut g, img, &p).unwrap();
    let w = g.value(p.fc_weight).clone();
    let bias = g.value(p.fc_bias.unwrap()).clone();
    for b in 0..2 {
        let means: Vec<f64> = (0..3).map(|c| img_t.item(b)[c * 15..(c + 1) * 15].iter().sum::<f64>() / 15.0).collect();
        for o in 0..8 {
            let expect = bias.data()[o] + (0..3).map(|c| w.get([o, c, 0, 0]) * means[c]).sum::<f64>();
            assert!((g.value(k).get([b, o, 0, 0]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_embedding_scales_rows_by_channel_mean() {
    // M = N = C = 2, Θ'' maps channel c to entry c of the flattened M x N.
    let gc = GuidedConv::new(4, 2, 2, 3);
    let mut g = Graph::new();
    let img = g.constant(Tensor::from_fn([1, 4, 3, 3], |[_, c, _, _]| [2.0, -1.0, 0.5, 3.0][c]));
    let fc = Tensor::from_fn(gc.fc_weight_shape(), |[o, c, _, _]| if o == c { 1.0 } else { 0.0 });
    let p = GuidedParams {
        kgl_weight: g.param(Tensor::zeros(gc.kgl_weight_shape())),
        kgl_bias: None,
        fc_weight: g.param(fc),
        fc_bias: Some(g.param(Tensor::zeros(gc.fc_bias_shape()))),
    };
    let k = gc.generate_crosschannel(&mut g, img, &p).unwrap();
    assert_eq!(g.value(k).data(), &[2.0, -1.0, 0.5, 3.0]);
}

#[test]
fn zero_generator_gives_zero_kernels_and_output() {
    let gc = GuidedConv::new(2, 3, 2, 3);
    let mut g = Graph::new();
    let img = g.constant(rand_t(11, [1, 2, 4, 4]));
    let depth = g.constant(rand_t(12, [1, 3, 4, 4]));
    let p = GuidedParams {
        kgl_weight: g.param(Tensor::zeros(gc.kgl_weight_shape())),
        kgl_bias: Some(g.param(Tensor::zeros(gc.kgl_bias_shape()))),
        fc_weight: g.param(rand_t(13, gc.fc_weight_shape().0)),
        fc_bias: None,
    };
    let out = gc.forward(&mut g, img, depth, &p).unwrap();
    assert!(g.value(out.channelwise_kernels).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.output).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let img = g.constant(rand_t(11, [1, 2, 4, 4]));
    let depth = g.constant(rand_t(12, [1, 3, 4, 4]));
    let p = GuidedParams {
        kgl_weight: g.param(rand_t(14, gc.kgl_weight_shape().0)),
        kgl_bias: None,
        fc_weight: g.param(Tensor::zeros(gc.fc_weight_shape())),
        fc_bias: None,
    };
    let out = gc.forward(&mut g, img, depth, &p).unwrap();
    assert!(g.value(out.crosschannel_kernels).data().iter().all(|&v| v == 0.0));
    assert!(g.value(out.output).data().iter().all(|&v| v == 0.0));
}

#[test]
fn kernels_depend_on_content_and_position() {
    let gc = GuidedConv::new(2, 2, 2, 3);
    let mut g = Graph::new();
    let a = g.constant(rand_t(15, [1, 2, 4, 4]));
    let b = g.constant(rand_t(16, [1, 2, 4, 4]));
    let p = module_params(&mut g, &gc, 17);
    let target = gdc_core::tensor::Shape::new(1, 2, 4, 4);
    let ka = gc.generate_channelwise(&mut g, a, &p, target).unwrap();
    let kb = gc.generate_channelwise(&mut g, b, &p, target).unwrap();
    assert_ne!(g.value(ka), g.value(kb));
    let kw = ChannelwiseKernels::new(g.value(ka).clone(), 3).unwrap();
    assert_ne!(kw.kernel_at(0, 0, 0, 0), kw.kernel_at(0, 0, 2, 1));
}

#[test]
fn batch_permutation_permutes_outputs() {
    let gc = GuidedConv::new(2, 2, 3, 3);
    let img_t = rand_t(18, [3, 2, 4, 4]);
    let dep_t = rand_t(19, [3, 2, 4, 4]);
    let perm = [2usize, 0, 1];
    let run = |img: Tensor<f64>, dep: Tensor<f64>| {
        let mut g = Graph::new();
        let i = g.constant(img);
        let d = g.constant(dep);
        let p = module_params(&mut g, &gc, 20);
        let out = gc.forward(&mut g, i, d, &p).unwrap();
        g.value(out.output).clone()
    };
    let base = run(img_t.clone(), dep_t.clone());
    let pi = Tensor::stack(&perm.iter().map(|&i| img_t.select_item(i)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
    let pd = Tensor::stack(&perm.iter().map(|&i| dep_t.select_item(i)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
    let permuted = run(pi, pd);
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(permuted.item(j), base.item(i));
    }
}

#[test]
fn every_generator_parameter_receives_gradient() {
    let gc = GuidedConv::new(2, 2, 2, 3);
    let mut g = Graph::new();
    let img = g.leaf(rand_t(21, [2, 2, 4, 4]), true);
    let depth = g.leaf(rand_t(22, [2, 2, 4, 4]), true);
    let p = module_params(&mut g, &gc, 23);
    let out = gc.forward(&mut g, img, depth, &p).unwrap();
    let loss = gdc_core::check::random_projection(&mut g, out.output, 24).unwrap();
    g.backward(loss).unwrap();
    for v in [p.kgl_weight, p.kgl_bias.unwrap(), p.fc_weight, p.fc_bias.unwrap(), img, depth] {
        let grad = g.grad(v).unwrap();
        assert!(grad.data().iter().all(|&x| x != 0.0 && x.is_finite()), "{:?}", g.shape(v));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factorization_identity(
        mi in 0usize..4, ni in 0usize..4, k3 in any::<bool>(),
        h in 3usize..=8, w in 3usize..=8, seed in any::<u64>()
    ) {
        let (m, n, k) = ([1, 2, 4, 8][mi], [1, 2, 4, 8][ni], if k3 { 3 } else { 1 });
        let s = rand_t(seed, [1, m, h, w]);
        let cw = ChannelwiseKernels::new(rand_t(seed ^ 1, [1, m * k * k, h, w]), k).unwrap();
        let cc = CrossChannelKernels::new(rand_t(seed ^ 2, [1, m * n, 1, 1]), m, n).unwrap();
        let two = crosschannel_conv(&channelwise_variant_conv(&s, &cw).unwrap(), &cc).unwrap();
        // Independent evaluation of the unfactorized sum with W = W'' * W'.
        let mut full = FullVariantKernels::zeros(1, m, n, k, h, w).unwrap();
        for a in 0..m { for b in 0..n { for kk in 0..k * k { for y in 0..h { for x in 0..w {
            full.set(0, a, b, kk, y, x, cc.get(0, a, b) * cw.get(0, a, kk, y, x));
        }}}}}
        let naive = naive_guided_conv(&s, &full).unwrap();
        let scale = two.max_abs().max(1e-30);
        for (a, b) in two.data().iter().zip(naive.data()) {
            prop_assert!((a - b).abs() / scale < 1e-10);
        }
    }
}
