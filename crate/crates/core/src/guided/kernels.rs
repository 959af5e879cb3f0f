//! Raw kernels of the spatially-variant convolutions.
//!
//! Channel-wise kernels are stored as a `[batch, M*K*K, H, W]` tensor: the
//! weight for channel `m`, window offset `k = ky*K + kx` and pixel `(y, x)`
//! lives at channel index `m*K*K + k`. This is exactly the output layout of
//! the convolution that generates them. Cross-channel kernels are stored as
//! `[batch, M*N, 1, 1]` with entry `m*N + n` mixing input channel `m` into
//! output channel `n`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Shape, Tensor};

/// Element cap for materialized unfactorized kernels.
pub const ORACLE_CAP_ELEMS: u128 = 1 << 26;

/// Output rows `[lo, hi)` for which `y + offset` stays inside `[0, extent)`.
fn valid_span(extent: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn check_channelwise(s: Shape, kernels: Shape, ksize: usize) -> Result<()> {
    if ksize == 0 || ksize.is_multiple_of(2) {
        return Err(Error::invalid(
            "channelwise_variant_conv",
            format!("kernel size {ksize} must be odd"),
        ));
    }
    let expect = Shape::new(s.n(), s.c() * ksize * ksize, s.h(), s.w());
    if kernels != expect {
        return Err(Error::ShapeMismatch {
            op: "channelwise_variant_conv",
            lhs: s,
            rhs: kernels,
        });
    }
    Ok(())
}

/// `out[b,m,p] = sum_k W'[b,m,k,p] * s[b,m,p+k]` with zero padding.
pub(crate) fn channelwise_forward<T: Real>(
    s: &Tensor<T>,
    kernels: &Tensor<T>,
    ksize: usize,
) -> Result<Tensor<T>> {
    check_channelwise(s.shape(), kernels.shape(), ksize)?;
    let [n, m, h, w] = s.shape().0;
    let k2 = ksize * ksize;
    let r = (ksize / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros(s.shape());
    for b in 0..n {
        for ch in 0..m {
            let src = &s.data()[(b * m + ch) * plane..][..plane];
            let dst = &mut out.data_mut()[(b * m + ch) * plane..][..plane];
            for k in 0..k2 {
                let dy = (k / ksize) as isize - r;
                let dx = (k % ksize) as isize - r;
                let wk = &kernels.data()[((b * m + ch) * k2 + k) * plane..][..plane];
                let (y0, y1) = valid_span(h, dy);
                let (x0, x1) = valid_span(w, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let wrow = &wk[y * w..(y + 1) * w];
                    let srow = &src[sy * w..(sy + 1) * w];
                    for x in x0..x1 {
                        drow[x] += wrow[x] * srow[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn channelwise_backward<T: Real>(
    s: &Tensor<T>,
    kernels: &Tensor<T>,
    ksize: usize,
    gout: &Tensor<T>,
    mut gs: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let [n, m, h, w] = s.shape().0;
    let k2 = ksize * ksize;
    let r = (ksize / 2) as isize;
    let plane = h * w;
    for b in 0..n {
        for ch in 0..m {
            let base = (b * m + ch) * plane;
            let src = &s.data()[base..base + plane];
            let g = &gout.data()[base..base + plane];
            for k in 0..k2 {
                let dy = (k / ksize) as isize - r;
                let dx = (k % ksize) as isize - r;
                let koff = ((b * m + ch) * k2 + k) * plane;
                let (y0, y1) = valid_span(h, dy);
                let (x0, x1) = valid_span(w, dx);
                if let Some(gs) = gs.as_deref_mut() {
                    let wk = &kernels.data()[koff..koff + plane];
                    let gsp = &mut gs[base..base + plane];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            gsp[sy * w + sx] += wk[y * w + x] * g[y * w + x];
                        }
                    }
                }
                if let Some(gk) = gk.as_deref_mut() {
                    let gkp = &mut gk[koff..koff + plane];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            gkp[y * w + x] += src[sy * w + sx] * g[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_crosschannel(d: Shape, kernels: Shape, out_channels: usize) -> Result<()> {
    let expect = Shape::new(d.n(), d.c() * out_channels, 1, 1);
    if out_channels == 0 || kernels != expect {
        return Err(Error::ShapeMismatch {
            op: "crosschannel_conv",
            lhs: d,
            rhs: kernels,
        });
    }
    Ok(())
}

/// `out[b,n,p] = sum_m W''[b,m,n] * d[b,m,p]`.
pub(crate) fn crosschannel_forward<T: Real>(
    d: &Tensor<T>,
    kernels: &Tensor<T>,
    out_channels: usize,
) -> Result<Tensor<T>> {
    check_crosschannel(d.shape(), kernels.shape(), out_channels)?;
    let [batch, m, h, w] = d.shape().0;
    let plane = h * w;
    let mut out = Tensor::zeros([batch, out_channels, h, w]);
    for b in 0..batch {
        let wb = &kernels.data()[b * m * out_channels..(b + 1) * m * out_channels];
        gemm(true, false, out_channels, plane, m, T::one(), wb, d.item(b), T::zero(), out.item_mut(b));
    }
    Ok(out)
}

pub(crate) fn crosschannel_backward<T: Real>(
    d: &Tensor<T>,
    kernels: &Tensor<T>,
    out_channels: usize,
    gout: &Tensor<T>,
    mut gd: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let [batch, m, h, w] = d.shape().0;
    let plane = h * w;
    let mn = m * out_channels;
    for b in 0..batch {
        let g = gout.item(b);
        if let Some(gd) = gd.as_deref_mut() {
            let wb = &kernels.data()[b * mn..(b + 1) * mn];
            let dst = &mut gd[b * m * plane..(b + 1) * m * plane];
            gemm(false, false, m, plane, out_channels, T::one(), wb, g, T::one(), dst);
        }
        if let Some(gk) = gk.as_deref_mut() {
            let dst = &mut gk[b * mn..(b + 1) * mn];
            gemm(false, true, m, out_channels, plane, T::one(), d.item(b), g, T::one(), dst);
        }
    }
}

/// Unfactorized kernel element count `batch*M*N*K^2*H*W`.
pub fn full_kernel_elems(batch: usize, m: usize, n: usize, ksize: usize, h: usize, w: usize) -> u128 {
    [batch, m, n, ksize * ksize, h, w]
        .iter()
        .fold(1u128, |acc, &v| acc * v as u128)
}

/// `out[b,n,p] = sum_m sum_k W[b,m,n,k,p] * s[b,m,p+k]`, evaluated directly.
pub(crate) fn naive_forward<T: Real>(
    s: &Tensor<T>,
    full: &[T],
    out_channels: usize,
    ksize: usize,
) -> Tensor<T> {
    let [batch, m, h, w] = s.shape().0;
    let k2 = ksize * ksize;
    let r = (ksize / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros([batch, out_channels, h, w]);
    for b in 0..batch {
        for n in 0..out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for ch in 0..m {
                        for k in 0..k2 {
                            let sy = y as isize + (k / ksize) as isize - r;
                            let sx = x as isize + (k % ksize) as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let widx = ((((b * m + ch) * out_channels + n) * k2 + k) * h + y) * w + x;
                            let sv = s.data()[(b * m + ch) * plane + sy as usize * w + sx as usize];
                            acc += full[widx] * sv;
                        }
                    }
                    out.data_mut()[(b * out_channels + n) * plane + y * w + x] = acc;
                }
            }
        }
    }
    out
}
