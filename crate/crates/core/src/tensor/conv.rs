use super::{gemm, Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvParams { stride, padding }
    }

    /// Stride 1 with `(k - 1) / 2` padding.
    pub const fn same(k: usize) -> Self {
        ConvParams {
            stride: 1,
            padding: (k - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvParams {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl DeconvParams {
    pub const fn new(stride: usize, padding: usize, output_padding: usize) -> Self {
        DeconvParams {
            stride,
            padding,
            output_padding,
        }
    }

    /// Exact `stride`x upsampling for odd `k`.
    pub const fn upsample(k: usize, stride: usize) -> Self {
        DeconvParams {
            stride,
            padding: (k - 1) / 2,
            output_padding: stride - 1,
        }
    }
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn deconv_out_size(
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 || output_padding >= stride {
        return None;
    }
    ((input - 1) * stride + k + output_padding).checked_sub(2 * padding)
}

/// Spatial geometry of one convolution: a `(c, h, w)` image mapped to
/// `(ho, wo)` columns through a `k x k` window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column offset `kx`.
    fn valid_range(&self, kx: usize, extent_in: usize, extent_out: usize) -> (usize, usize) {
        // input index = o * stride + kx - pad must lie in [0, extent_in)
        let s = self.stride;
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(s)
        } else {
            0
        };
        let hi = if extent_in + self.pad > kx {
            ((extent_in + self.pad - kx - 1) / s + 1).min(extent_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    pub fn im2col<T: Real>(&self, img: &[T], col: &mut [T]) {
        let (ho, wo, k, s) = (self.ho, self.wo, self.k, self.stride);
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, ho);
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, wo);
                    for oy in 0..ho {
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if oy < oy_lo || oy >= oy_hi {
                            drow.fill(T::zero());
                            continue;
                        }
                        let iy = oy * s + ky - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        drow[..ox_lo].fill(T::zero());
                        drow[ox_hi..].fill(T::zero());
                        if s == 1 {
                            let ix0 = ox_lo + kx - self.pad;
                            drow[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox] = src[ox * s + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds columns into `img`.
    pub fn col2im<T: Real>(&self, col: &[T], img: &mut [T]) {
        let (ho, wo, k, s) = (self.ho, self.wo, self.k, self.stride);
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, ho);
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - self.pad;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        for ox in ox_lo..ox_hi {
                            dst[ox * s + kx - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel(op: &'static str, x: Shape, w: Shape) -> Result<()> {
    if w.h() != w.w() || w.h() == 0 {
        return Err(Error::invalid(op, format!("kernel {w} must be square")));
    }
    if w.h().is_multiple_of(2) {
        return Err(Error::invalid(op, format!("kernel size {} must be odd", w.h())));
    }
    let _ = x;
    Ok(())
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::ShapeMismatch {
                op,
                lhs: Shape::new(1, channels, 1, 1),
                rhs: b.shape(),
            });
        }
    }
    Ok(())
}

pub(crate) fn conv_geometry(x: Shape, w: Shape, p: ConvParams) -> Result<Geometry> {
    check_kernel("conv2d", x, w)?;
    if x.c() != w.c() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x,
            rhs: w,
        });
    }
    if p.stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let k = w.h();
    let ho = conv_out_size(x.h(), k, p.stride, p.padding);
    let wo = conv_out_size(x.w(), k, p.stride, p.padding);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Geometry {
            c: x.c(),
            h: x.h(),
            w: x.w(),
            k,
            stride: p.stride,
            pad: p.padding,
            ho,
            wo,
        }),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x,
            rhs: w,
        }),
    }
}

/// Weight layout `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x.shape(), w.shape(), p)?;
    let cout = w.shape().n();
    check_bias("conv2d", bias, cout)?;
    let n = x.shape().n();
    let mut out = Tensor::zeros([n, cout, g.ho, g.wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for b in 0..n {
        let src = if g.is_pointwise() {
            x.item(b)
        } else {
            g.im2col(x.item(b), &mut col);
            &col
        };
        let dst = out.item_mut(b);
        gemm(false, false, cout, g.col_cols(), g.col_rows(), T::one(), w.data(), src, T::zero(), dst);
        if let Some(bias) = bias {
            add_channel_bias(dst, bias.data(), g.col_cols());
        }
    }
    Ok(out)
}

fn add_channel_bias<T: Real>(dst: &mut [T], bias: &[T], plane: usize) {
    for (c, &bv) in bias.iter().enumerate() {
        for v in &mut dst[c * plane..(c + 1) * plane] {
            *v += bv;
        }
    }
}

fn accumulate_channel_sums<T: Real>(grad: &[T], out: &mut [T], plane: usize) {
    for (c, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &grad[c * plane..(c + 1) * plane] {
            acc += v;
        }
        *o += acc;
    }
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: ConvParams,
    gout: &Tensor<T>,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let g = conv_geometry(x.shape(), w.shape(), p).expect("geometry validated in forward");
    let cout = w.shape().n();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let item = x.shape().item_len();
    for b in 0..x.shape().n() {
        let dy = gout.item(b);
        if let Some(gw) = gw.as_deref_mut() {
            let src = if g.is_pointwise() {
                x.item(b)
            } else {
                g.im2col(x.item(b), &mut col);
                &col
            };
            gemm(false, true, cout, rows, cols, T::one(), dy, src, T::one(), gw);
        }
        if let Some(gb) = gb.as_deref_mut() {
            accumulate_channel_sums(dy, gb, cols);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let dst = &mut gx[b * item..(b + 1) * item];
            if g.is_pointwise() {
                gemm(true, false, rows, cols, cout, T::one(), w.data(), dy, T::one(), dst);
            } else {
                gemm(true, false, rows, cols, cout, T::one(), w.data(), dy, T::zero(), &mut col);
                g.col2im(&col, dst);
            }
        }
    }
}

/// Geometry of the forward convolution whose data-gradient a transposed
/// convolution computes. Weight layout `[c_in, c_out, k, k]`.
pub(crate) fn deconv_geometry(x: Shape, w: Shape, p: DeconvParams) -> Result<(Geometry, usize)> {
    check_kernel("deconv2d", x, w)?;
    if x.c() != w.n() {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            lhs: x,
            rhs: w,
        });
    }
    if p.stride == 0 {
        return Err(Error::invalid("deconv2d", "stride must be positive"));
    }
    let k = w.h();
    let ho = deconv_out_size(x.h(), k, p.stride, p.padding, p.output_padding);
    let wo = deconv_out_size(x.w(), k, p.stride, p.padding, p.output_padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            lhs: x,
            rhs: w,
        });
    };
    let cout = w.c();
    Ok((
        Geometry {
            c: cout,
            h: ho,
            w: wo,
            k,
            stride: p.stride,
            pad: p.padding,
            ho: x.h(),
            wo: x.w(),
        },
        cout,
    ))
}

pub(crate) fn deconv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: DeconvParams,
) -> Result<Tensor<T>> {
    let (g, cout) = deconv_geometry(x.shape(), w.shape(), p)?;
    check_bias("deconv2d", bias, cout)?;
    let n = x.shape().n();
    let cin = x.shape().c();
    let mut out = Tensor::zeros([n, cout, g.h, g.w]);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..n {
        let dst = out.item_mut(b);
        if g.is_pointwise() {
            gemm(true, false, rows, cols, cin, T::one(), w.data(), x.item(b), T::zero(), dst);
        } else {
            gemm(true, false, rows, cols, cin, T::one(), w.data(), x.item(b), T::zero(), &mut col);
            g.col2im(&col, dst);
        }
        if let Some(bias) = bias {
            add_channel_bias(dst, bias.data(), g.h * g.w);
        }
    }
    Ok(out)
}

pub(crate) fn deconv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: DeconvParams,
    gout: &Tensor<T>,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (g, _) = deconv_geometry(x.shape(), w.shape(), p).expect("geometry validated in forward");
    let cin = x.shape().c();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let item = x.shape().item_len();
    for b in 0..x.shape().n() {
        let dy = gout.item(b);
        if let Some(gb) = gb.as_deref_mut() {
            accumulate_channel_sums(dy, gb, g.h * g.w);
        }
        if gx.is_none() && gw.is_none() {
            continue;
        }
        let cols_of_dy = if g.is_pointwise() {
            dy
        } else {
            g.im2col(dy, &mut col);
            &col
        };
        if let Some(gx) = gx.as_deref_mut() {
            let dst = &mut gx[b * item..(b + 1) * item];
            gemm(false, false, cin, cols, rows, T::one(), w.data(), cols_of_dy, T::one(), dst);
        }
        if let Some(gw) = gw.as_deref_mut() {
            gemm(false, true, cin, rows, cols, T::one(), x.item(b), cols_of_dy, T::one(), gw);
        }
    }
}
