//! Forward/backward kernels for the non-convolutional layers.

use super::{gemm, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Variance guard used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Default running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics of one training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimator folded into running stats.
    pub var_unbiased: Vec<T>,
}

/// Exponential moving averages of the per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + momentum * b;
        }
    }
}

pub(crate) fn check_channel_param<T: Real>(op: &'static str, x: Shape, p: &Tensor<T>) -> Result<()> {
    if p.len() != x.c() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x,
            rhs: p.shape(),
        });
    }
    Ok(())
}

/// Training-mode normalization. Returns `(y, xhat, inv_std, stats)`.
pub(crate) fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>, BatchStats<T>)> {
    let s = x.shape();
    check_channel_param("batch_norm", s, gamma)?;
    check_channel_param("batch_norm", s, beta)?;
    let count = s.n() * s.plane();
    if count == 0 {
        return Err(Error::EmptyReduction("batch_norm"));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let cnt = T::from_usize(count).unwrap();
    let plane = s.plane();
    let mut y = Tensor::zeros(s);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); s.c()];
    let mut stats = BatchStats {
        mean: vec![T::zero(); s.c()],
        var_unbiased: vec![T::zero(); s.c()],
    };
    for c in 0..s.c() {
        let mut sum = T::zero();
        for b in 0..s.n() {
            let off = (b * s.c() + c) * plane;
            for &v in &x.data()[off..off + plane] {
                sum += v;
            }
        }
        let mean = sum / cnt;
        let mut sq = T::zero();
        for b in 0..s.n() {
            let off = (b * s.c() + c) * plane;
            for &v in &x.data()[off..off + plane] {
                let d = v - mean;
                sq += d * d;
            }
        }
        let var = sq / cnt;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        stats.mean[c] = mean;
        stats.var_unbiased[c] = if count > 1 {
            sq / T::from_usize(count - 1).unwrap()
        } else {
            var
        };
        let (g, bt) = (gamma.data()[c], beta.data()[c]);
        for b in 0..s.n() {
            let off = (b * s.c() + c) * plane;
            for i in off..off + plane {
                let xh = (x.data()[i] - mean) * istd;
                xhat[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((y, xhat, inv_std, stats))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_train_backward<T: Real>(
    shape: Shape,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gout: &Tensor<T>,
    mut gx: Option<&mut [T]>,
    mut ggamma: Option<&mut [T]>,
    mut gbeta: Option<&mut [T]>,
) {
    let plane = shape.plane();
    let cnt = T::from_usize(shape.n() * plane).unwrap();
    let dy = gout.data();
    for c in 0..shape.c() {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..shape.n() {
            let off = (b * shape.c() + c) * plane;
            for i in off..off + plane {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            gg[c] += sum_dy_xhat;
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            gb[c] += sum_dy;
        }
        if let Some(gx) = gx.as_deref_mut() {
            let scale = gamma.data()[c] * inv_std[c] / cnt;
            for b in 0..shape.n() {
                let off = (b * shape.c() + c) * plane;
                for i in off..off + plane {
                    gx[i] += scale * (cnt * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        }
    }
}

/// Inference-mode normalization with fixed statistics.
pub(crate) fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let s = x.shape();
    check_channel_param("batch_norm", s, gamma)?;
    check_channel_param("batch_norm", s, beta)?;
    if mean.len() != s.c() || var.len() != s.c() {
        return Err(Error::invalid("batch_norm", "running statistics length differs from channel count"));
    }
    if s.n() * s.plane() == 0 {
        return Err(Error::EmptyReduction("batch_norm"));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let plane = s.plane();
    let mut y = Tensor::zeros(s);
    for b in 0..s.n() {
        for c in 0..s.c() {
            let off = (b * s.c() + c) * plane;
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - mean[c] * scale;
            for i in off..off + plane {
                y.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    Ok((y, inv_std))
}

/// `x` is `[n, f, ...]` flattened per item, `w` is `[out, f, 1, 1]`.
pub(crate) fn linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x.shape().n();
    let f = x.shape().item_len();
    let out = w.shape().n();
    if w.shape().item_len() != f {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    if let Some(b) = bias {
        if b.len() != out {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
    }
    let mut y = Tensor::zeros([n, out, 1, 1]);
    gemm(false, true, n, out, f, T::one(), x.data(), w.data(), T::zero(), y.data_mut());
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let n = x.shape().n();
    let f = x.shape().item_len();
    let out = w.shape().n();
    if let Some(gx) = gx {
        gemm(false, false, n, f, out, T::one(), gout.data(), w.data(), T::one(), gx);
    }
    if let Some(gw) = gw {
        gemm(true, false, out, f, n, T::one(), gout.data(), x.data(), T::one(), gw);
    }
    if let Some(gb) = gb {
        for row in gout.data().chunks(out) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

pub(crate) fn avg_pool_global<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::EmptyReduction("avg_pool_global"));
    }
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| {
            let mut acc = T::zero();
            for &v in p {
                acc += v;
            }
            acc * inv
        })
        .collect();
    Tensor::from_vec([s.n(), s.c(), 1, 1], data)
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
        return Err(Error::ShapeMismatch {
            op: "concat",
            lhs: sa,
            rhs: sb,
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n() {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec([sa.n(), sa.c() + sb.c(), sa.h(), sa.w()], data)
}
