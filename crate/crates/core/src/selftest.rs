//! Embedded invariant suite: factorization identity, gradient checks and
//! cost-model reproduction. Shared by `gdc selftest` and the test targets.

use rand::Rng;

use crate::check::{check_gradients, random_projection, relative_error};
use crate::cost;
use crate::error::Result;
use crate::guided::{
    channelwise_variant_conv, crosschannel_conv, naive_guided_conv, ChannelwiseKernels, CrossChannelKernels,
    FullVariantKernels, GuidedConv, GuidedParams,
};
use crate::rng::{stream, StreamRng};
use crate::tensor::{ConvParams, DeconvParams, Graph, Real, Tensor};

/// Result of one named group of checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance && self.detail.is_empty()
    }
}

fn rand_tensor<T: Real>(rng: &mut StreamRng, shape: [usize; 4]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

/// Worst relative error, elementwise, normalized by the larger magnitude of
/// the two tensors.
fn tensor_rel_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = a.max_abs().to_f64_lossy().max(b.max_abs().to_f64_lossy()).max(1e-30);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs() / scale)
        .fold(0.0, f64::max)
}

/// Two-stage output vs the naive convolution with the induced kernel, over
/// random configurations with `M, N in {1,2,4,8}`, `K in {1,3}` and
/// `H, W in 3..=8`.
pub fn factorization_identity<T: Real>(configs: usize, seed: u64) -> Result<GroupResult> {
    let mut rng = stream(seed, "selftest-factorization");
    let choices = [1usize, 2, 4, 8];
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let m = choices[rng.random_range(0..4)];
        let n = choices[rng.random_range(0..4)];
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let h = rng.random_range(3..=8);
        let w = rng.random_range(3..=8);
        let b = rng.random_range(1..=2);
        let s = rand_tensor::<T>(&mut rng, [b, m, h, w]);
        let cw = ChannelwiseKernels::new(rand_tensor(&mut rng, [b, m * k * k, h, w]), k)?;
        let cc = CrossChannelKernels::new(rand_tensor(&mut rng, [b, m * n, 1, 1]), m, n)?;
        let two_stage = crosschannel_conv(&channelwise_variant_conv(&s, &cw)?, &cc)?;
        let naive = naive_guided_conv(&s, &FullVariantKernels::induced(&cw, &cc)?)?;
        worst = worst.max(tensor_rel_error(&two_stage, &naive));
    }
    let tolerance = if T::PRECISION == crate::tensor::Precision::F64 { 1e-10 } else { 1e-5 };
    Ok(GroupResult {
        name: format!("factorization identity ({})", T::PRECISION),
        cases: configs,
        worst,
        tolerance,
        detail: String::new(),
    })
}

/// Differentiable operations covered by [`gradient_suite`].
pub const GRADIENT_OPS: [&str; 8] = [
    "conv2d",
    "deconv2d",
    "batch_norm",
    "fully_connected",
    "channelwise_variant_conv",
    "crosschannel_conv",
    "guided_module",
    "masked_mse_loss",
];

/// Central-difference check of one operation on a random small shape.
pub fn gradient_trial(op: &str, trial: u64, seed: u64) -> Result<f64> {
    let mut rng = stream(seed ^ trial.wrapping_mul(0x9e37_79b9), op);
    let proj = trial + 1;
    let outcome = match op {
        "conv2d" => {
            let ci = rng.random_range(1..=3);
            let co = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let (h, w) = (rng.random_range(k..=5), rng.random_range(k..=5));
            let batch = rng.random_range(1..=2);
            let x = rand_tensor(&mut rng, [batch, ci, h, w]);
            let wt = rand_tensor(&mut rng, [co, ci, k, k]);
            let b = rand_tensor(&mut rng, [1, co, 1, 1]);
            check_gradients(
                &[x, wt, b],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(stride, pad))?;
                    random_projection(g, y, proj)
                },
                trial,
            )?
        }
        "deconv2d" => {
            let ci = rng.random_range(1..=3);
            let co = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let out_pad = rng.random_range(0..stride);
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let x = rand_tensor(&mut rng, [1, ci, h, w]);
            let wt = rand_tensor(&mut rng, [ci, co, k, k]);
            let b = rand_tensor(&mut rng, [1, co, 1, 1]);
            check_gradients(
                &[x, wt, b],
                |g, v| {
                    let y = g.deconv2d(v[0], v[1], Some(v[2]), DeconvParams::new(stride, pad, out_pad))?;
                    random_projection(g, y, proj)
                },
                trial,
            )?
        }
        "batch_norm" => {
            let c = rng.random_range(1..=3);
            let (h, w) = (rng.random_range(2..=3), rng.random_range(2..=3));
            let x = rand_tensor(&mut rng, [2, c, h, w]);
            let gamma = rand_tensor(&mut rng, [1, c, 1, 1]);
            let beta = rand_tensor(&mut rng, [1, c, 1, 1]);
            check_gradients(
                &[x, gamma, beta],
                |g, v| {
                    let (y, _) = g.batch_norm_train(v[0], v[1], v[2])?;
                    random_projection(g, y, proj)
                },
                trial,
            )?
        }
        "fully_connected" => {
            let fi = rng.random_range(1..=5);
            let fo = rng.random_range(1..=4);
            let batch = rng.random_range(1..=3);
            let x = rand_tensor(&mut rng, [batch, fi, 1, 1]);
            let wt = rand_tensor(&mut rng, [fo, fi, 1, 1]);
            let b = rand_tensor(&mut rng, [1, fo, 1, 1]);
            check_gradients(
                &[x, wt, b],
                |g, v| {
                    let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
                    random_projection(g, y, proj)
                },
                trial,
            )?
        }
        "channelwise_variant_conv" => {
            let m = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let (b, h, w) = (rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=4));
            let s = rand_tensor(&mut rng, [b, m, h, w]);
            let kern = rand_tensor(&mut rng, [b, m * k * k, h, w]);
            check_gradients(
                &[s, kern],
                |g, v| {
                    let y = g.channelwise_variant_conv(v[0], v[1], k)?;
                    random_projection(g, y, proj)
                },
                trial,
            )?
        }
        "crosschannel_conv" => {
            let m = rng.random_range(1..=3);
            let n = rng.random_range(1..=3);
            let b = rng.random_range(1..=2);
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let d = rand_tensor(&mut rng, [b, m, h, w]);
            let kern = rand_tensor(&mut rng, [b, m * n, 1, 1]);
            check_gradients(
                &[d, kern],
                |g, v| {
                    let y = g.crosschannel_conv(v[0], v[1], n)?;
                    random_projection(g, y, proj)
                },
                trial,
            )?
        }
        "guided_module" => {
            let gc = GuidedConv::new(2, 2, rng.random_range(1..=3), 3);
            let img = rand_tensor(&mut rng, [1, 2, 4, 4]);
            let depth = rand_tensor(&mut rng, [1, 2, 4, 4]);
            let [a, b, c, d] = [
                rand_tensor(&mut rng, gc.kgl_weight_shape().0),
                rand_tensor(&mut rng, gc.kgl_bias_shape().0),
                rand_tensor(&mut rng, gc.fc_weight_shape().0),
                rand_tensor(&mut rng, gc.fc_bias_shape().0),
            ];
            check_gradients(
                &[img, depth, a, b, c, d],
                |g, v| {
                    let params = GuidedParams {
                        kgl_weight: v[2],
                        kgl_bias: Some(v[3]),
                        fc_weight: v[4],
                        fc_bias: Some(v[5]),
                    };
                    let out = gc.forward(g, v[0], v[1], &params)?;
                    random_projection(g, out.output, proj)
                },
                trial,
            )?
        }
        "masked_mse_loss" => {
            let shape = [rng.random_range(1..=2), 1, rng.random_range(2..=4), rng.random_range(2..=4)];
            let pred = rand_tensor(&mut rng, shape);
            let target: Tensor<f64> = rand_tensor(&mut rng, shape);
            let mut mask: Vec<bool> = (0..pred.len()).map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            let valid = mask.iter().filter(|&&m| m).count() as f64;
            check_gradients(
                &[pred],
                |g, v| g.masked_squared_error(v[0], &target, &mask, 1.0 / valid),
                trial,
            )?
        }
        other => {
            return Err(crate::error::Error::invalid("gradient_trial", format!("unknown operation {other}")));
        }
    };
    Ok(outcome.max_rel_error.max(outcome.directional_rel_error))
}

/// Gradient checks for every operation in [`GRADIENT_OPS`], `trials` random
/// shapes each, tolerance `1e-4`.
pub fn gradient_suite(trials: u64, seed: u64) -> Result<Vec<GroupResult>> {
    GRADIENT_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for t in 0..trials {
                worst = worst.max(gradient_trial(op, t, seed)?);
            }
            Ok(GroupResult {
                name: format!("gradient {op}"),
                cases: trials as usize,
                worst,
                tolerance: 1e-4,
                detail: String::new(),
            })
        })
        .collect()
}

/// Reproduces the `M = N = 128, K = 3, H = 64, W = 304` cost example.
pub fn cost_example() -> GroupResult {
    let r = cost::analyze(128, 128, 3, 64, 304, 4).expect("positive dimensions");
    let mut detail = Vec::new();
    if r.naive_bytes != 11_475_615_744 {
        detail.push(format!("naive bytes {}", r.naive_bytes));
    }
    if r.fact_bytes != 89_718_784 {
        detail.push(format!("factorized bytes {}", r.fact_bytes));
    }
    if cost::render_gib(r.naive_bytes) != "10.7 GB" || cost::render_gib(r.fact_bytes) != "0.08 GB" {
        detail.push(format!(
            "rendered {} / {}",
            cost::render_gib(r.naive_bytes),
            cost::render_gib(r.fact_bytes)
        ));
    }
    let inv = r.naive_over_fact();
    if !(127.0..=129.0).contains(&inv) {
        detail.push(format!("naive/fact {inv}"));
    }
    GroupResult {
        name: "cost example".into(),
        cases: 1,
        worst: 0.0,
        tolerance: 1.0,
        detail: detail.join("; "),
    }
}

/// Checks the pixel-wise degenerate case: constant kernels with identity
/// mixing equal a depthwise `conv2d`.
pub fn depthwise_reduction(seed: u64) -> Result<GroupResult> {
    let mut rng = stream(seed, "selftest-depthwise");
    let (m, h, w) = (3, 5, 6);
    let s = rand_tensor::<f64>(&mut rng, [1, m, h, w]);
    let base: Vec<f64> = (0..m * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cw = ChannelwiseKernels::from_fn(1, m, 3, h, w, |_, c, k, _, _| base[c * 9 + k])?;
    let cc = CrossChannelKernels::from_fn(1, m, m, |_, a, b| if a == b { 1.0 } else { 0.0 })?;
    let out = crosschannel_conv(&channelwise_variant_conv(&s, &cw)?, &cc)?;
    let mut worst = 0.0f64;
    for c in 0..m {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 1, h, w], |[_, _, y, xx]| s.get([0, c, y, xx])));
        let wt = g.constant(Tensor::from_fn([1, 1, 3, 3], |[_, _, ky, kx]| base[c * 9 + ky * 3 + kx]));
        let y = g.conv2d(x, wt, None, ConvParams::same(3))?;
        for yy in 0..h {
            for xx in 0..w {
                worst = worst.max(relative_error(g.value(y).get([0, 0, yy, xx]), out.get([0, c, yy, xx])));
            }
        }
    }
    Ok(GroupResult {
        name: "depthwise reduction".into(),
        cases: m,
        worst,
        tolerance: 1e-6,
        detail: String::new(),
    })
}

/// Every group with its default sizes.
pub fn run_all(seed: u64) -> Result<Vec<GroupResult>> {
    let mut out = vec![
        factorization_identity::<f64>(100, seed)?,
        factorization_identity::<f32>(100, seed)?,
        depthwise_reduction(seed)?,
    ];
    out.extend(gradient_suite(5, seed)?);
    out.push(cost_example());
    Ok(out)
}
