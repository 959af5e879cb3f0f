//! Guided convolution: image-conditioned, spatially-variant kernels applied
//! to depth features.
//!
//! The full operator mixes every input channel into every output channel with
//! a different `K x K` kernel at every pixel. Materializing that kernel costs
//! `M*N*K^2*H*W` values, so the trainable path factorizes it:
//!
//! 1. a channel-wise stage whose per-pixel `K x K` kernels come from a
//!    convolution over the image feature, and
//! 2. a cross-channel `1 x 1` stage whose `M x N` mixing matrix comes from a
//!    fully-connected layer over the spatially pooled image feature and is
//!    shared by all pixels of one image.
//!
//! [`naive_guided_conv`] evaluates the unfactorized form directly and is kept
//! as a reference and cost baseline.

pub mod kernels;

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::init::fan_in_uniform;
use crate::tensor::{ConvParams, Graph, Real, Shape, Tensor, Var};
pub use kernels::ORACLE_CAP_ELEMS;

thread_local! {
    static KERNEL_BYTES: Cell<u128> = const { Cell::new(0) };
}

/// Bytes of kernel buffers constructed on this thread since the last reset.
/// Clones are not counted.
pub fn kernel_bytes_allocated() -> u128 {
    KERNEL_BYTES.with(Cell::get)
}

pub fn reset_kernel_bytes() {
    KERNEL_BYTES.with(|c| c.set(0));
}

fn record_kernel_bytes(bytes: usize) {
    KERNEL_BYTES.with(|c| c.set(c.get() + bytes as u128));
}

/// Per-pixel, per-channel `K x K` kernels, shape `(batch, M, K^2, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelwiseKernels<T> {
    tensor: Tensor<T>,
    ksize: usize,
}

impl<T: Real> ChannelwiseKernels<T> {
    /// Wraps a `[batch, M*K*K, H, W]` tensor.
    pub fn new(tensor: Tensor<T>, ksize: usize) -> Result<Self> {
        if ksize == 0 || ksize.is_multiple_of(2) {
            return Err(Error::invalid("channelwise kernels", format!("kernel size {ksize} must be odd")));
        }
        if !tensor.shape().c().is_multiple_of(ksize * ksize) {
            return Err(Error::invalid(
                "channelwise kernels",
                format!("{} channels is not a multiple of K^2 = {}", tensor.shape().c(), ksize * ksize),
            ));
        }
        record_kernel_bytes(tensor.len() * std::mem::size_of::<T>());
        Ok(ChannelwiseKernels { tensor, ksize })
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        ksize: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let k2 = ksize * ksize;
        let t = Tensor::from_fn([batch, channels * k2, h, w], |[b, c, y, x]| f(b, c / k2, c % k2, y, x));
        Self::new(t, ksize)
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape().n()
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape().c() / (self.ksize * self.ksize)
    }

    pub fn ksize(&self) -> usize {
        self.ksize
    }

    pub fn height(&self) -> usize {
        self.tensor.shape().h()
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().w()
    }

    /// Weight of window offset `k = ky*K + kx` for channel `m` at `(y, x)`.
    pub fn get(&self, b: usize, m: usize, k: usize, y: usize, x: usize) -> T {
        self.tensor.get([b, m * self.ksize * self.ksize + k, y, x])
    }

    /// The `K x K` kernel at one pixel, row-major.
    pub fn kernel_at(&self, b: usize, m: usize, y: usize, x: usize) -> Vec<T> {
        (0..self.ksize * self.ksize).map(|k| self.get(b, m, k, y, x)).collect()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn buffer_bytes(&self) -> usize {
        self.tensor.len() * std::mem::size_of::<T>()
    }
}

/// Per-image `M x N` mixing matrices, shared across pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossChannelKernels<T> {
    tensor: Tensor<T>,
    in_channels: usize,
    out_channels: usize,
}

impl<T: Real> CrossChannelKernels<T> {
    /// Wraps a `[batch, M*N, 1, 1]` tensor.
    pub fn new(tensor: Tensor<T>, in_channels: usize, out_channels: usize) -> Result<Self> {
        let s = tensor.shape();
        if s.h() != 1 || s.w() != 1 || s.c() != in_channels * out_channels {
            return Err(Error::invalid(
                "crosschannel kernels",
                format!("shape {s} is not [batch, {in_channels}*{out_channels}, 1, 1]"),
            ));
        }
        record_kernel_bytes(tensor.len() * std::mem::size_of::<T>());
        Ok(CrossChannelKernels {
            tensor,
            in_channels,
            out_channels,
        })
    }

    pub fn from_fn(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let t = Tensor::from_fn([batch, in_channels * out_channels, 1, 1], |[b, c, _, _]| {
            f(b, c / out_channels, c % out_channels)
        });
        Self::new(t, in_channels, out_channels)
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape().n()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn get(&self, b: usize, m: usize, n: usize) -> T {
        self.tensor.get([b, m * self.out_channels + n, 0, 0])
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn buffer_bytes(&self) -> usize {
        self.tensor.len() * std::mem::size_of::<T>()
    }
}

/// Unfactorized kernels, shape `(batch, M, N, K^2, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullVariantKernels<T> {
    data: Vec<T>,
    dims: [usize; 6],
    ksize: usize,
}

impl<T: Real> FullVariantKernels<T> {
    /// Allocates zeroed kernels, refusing sizes above `cap` elements.
    pub fn zeros_capped(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        ksize: usize,
        h: usize,
        w: usize,
        cap: u128,
    ) -> Result<Self> {
        if ksize == 0 || ksize.is_multiple_of(2) {
            return Err(Error::invalid("full kernels", format!("kernel size {ksize} must be odd")));
        }
        let elems = kernels::full_kernel_elems(batch, in_channels, out_channels, ksize, h, w);
        if elems > cap {
            return Err(Error::OracleCapExceeded {
                elems,
                bytes: elems * std::mem::size_of::<T>() as u128,
                cap,
            });
        }
        record_kernel_bytes(elems as usize * std::mem::size_of::<T>());
        Ok(FullVariantKernels {
            data: vec![T::zero(); elems as usize],
            dims: [batch, in_channels, out_channels, ksize * ksize, h, w],
            ksize,
        })
    }

    pub fn zeros(batch: usize, in_channels: usize, out_channels: usize, ksize: usize, h: usize, w: usize) -> Result<Self> {
        Self::zeros_capped(batch, in_channels, out_channels, ksize, h, w, ORACLE_CAP_ELEMS)
    }

    /// The kernel the two-stage factorization implies:
    /// `W[b,m,n,k,p] = W''[b,m,n] * W'[b,m,k,p]`.
    pub fn induced(cw: &ChannelwiseKernels<T>, cc: &CrossChannelKernels<T>) -> Result<Self> {
        if cw.batch() != cc.batch() || cw.channels() != cc.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "induced kernels",
                lhs: cw.tensor().shape(),
                rhs: cc.tensor().shape(),
            });
        }
        let (h, w, ks) = (cw.height(), cw.width(), cw.ksize());
        let mut full = Self::zeros(cw.batch(), cw.channels(), cc.out_channels(), ks, h, w)?;
        for b in 0..cw.batch() {
            for m in 0..cw.channels() {
                for n in 0..cc.out_channels() {
                    let mix = cc.get(b, m, n);
                    for k in 0..ks * ks {
                        for y in 0..h {
                            for x in 0..w {
                                full.set(b, m, n, k, y, x, mix * cw.get(b, m, k, y, x));
                            }
                        }
                    }
                }
            }
        }
        Ok(full)
    }

    fn offset(&self, b: usize, m: usize, n: usize, k: usize, y: usize, x: usize) -> usize {
        let [_, dm, dn, dk, dh, dw] = self.dims;
        ((((b * dm + m) * dn + n) * dk + k) * dh + y) * dw + x
    }

    pub fn get(&self, b: usize, m: usize, n: usize, k: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, m, n, k, y, x)]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn set(&mut self, b: usize, m: usize, n: usize, k: usize, y: usize, x: usize, v: T) {
        let o = self.offset(b, m, n, k, y, x);
        self.data[o] = v;
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `(batch, M, N, K^2, H, W)`.
    pub fn dims(&self) -> [usize; 6] {
        self.dims
    }

    pub fn ksize(&self) -> usize {
        self.ksize
    }

    pub fn buffer_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}

/// Unfactorized spatially-variant convolution; forward only.
pub fn naive_guided_conv<T: Real>(s: &Tensor<T>, kernels: &FullVariantKernels<T>) -> Result<Tensor<T>> {
    let [b, m, n, _, h, w] = kernels.dims();
    let sh = s.shape();
    if sh.n() != b || sh.c() != m || sh.h() != h || sh.w() != w {
        return Err(Error::ShapeMismatch {
            op: "naive_guided_conv",
            lhs: sh,
            rhs: Shape::new(b, m, h, w),
        });
    }
    Ok(kernels::naive_forward(s, &kernels.data, n, kernels.ksize()))
}

/// Value-level channel-wise stage.
pub fn channelwise_variant_conv<T: Real>(s: &Tensor<T>, k: &ChannelwiseKernels<T>) -> Result<Tensor<T>> {
    kernels::channelwise_forward(s, k.tensor(), k.ksize())
}

/// Value-level cross-channel stage.
pub fn crosschannel_conv<T: Real>(d: &Tensor<T>, k: &CrossChannelKernels<T>) -> Result<Tensor<T>> {
    if d.shape().c() != k.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "crosschannel_conv",
            lhs: d.shape(),
            rhs: k.tensor().shape(),
        });
    }
    kernels::crosschannel_forward(d, k.tensor(), k.out_channels())
}

/// Graph handles of the kernel-generating parameters.
#[derive(Debug, Clone, Copy)]
pub struct GuidedParams {
    /// `[M*K^2, C_img, K_gen, K_gen]`.
    pub kgl_weight: Var,
    /// `[1, M*K^2, 1, 1]`.
    pub kgl_bias: Option<Var>,
    /// `[M*N, C_img, 1, 1]`.
    pub fc_weight: Var,
    /// `[1, M*N, 1, 1]`.
    pub fc_bias: Option<Var>,
}

/// Intermediate nodes of one guided convolution.
#[derive(Debug, Clone, Copy)]
pub struct GuidedOutput {
    pub output: Var,
    pub channelwise_kernels: Var,
    pub crosschannel_kernels: Var,
    pub intermediate: Var,
}

/// Shape configuration of one guided convolution module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidedConv {
    pub image_channels: usize,
    /// `M`: channels of the depth feature.
    pub depth_channels: usize,
    /// `N`: channels of the output.
    pub out_channels: usize,
    /// `K`: size of the generated per-pixel kernels.
    pub ksize: usize,
    /// Window of the convolution that generates them.
    pub gen_ksize: usize,
}

impl GuidedConv {
    pub fn new(image_channels: usize, depth_channels: usize, out_channels: usize, ksize: usize) -> Self {
        GuidedConv {
            image_channels,
            depth_channels,
            out_channels,
            ksize,
            gen_ksize: 3,
        }
    }

    pub fn kgl_weight_shape(&self) -> Shape {
        Shape::new(
            self.depth_channels * self.ksize * self.ksize,
            self.image_channels,
            self.gen_ksize,
            self.gen_ksize,
        )
    }

    pub fn kgl_bias_shape(&self) -> Shape {
        Shape::new(1, self.depth_channels * self.ksize * self.ksize, 1, 1)
    }

    pub fn fc_weight_shape(&self) -> Shape {
        Shape::new(self.depth_channels * self.out_channels, self.image_channels, 1, 1)
    }

    pub fn fc_bias_shape(&self) -> Shape {
        Shape::new(1, self.depth_channels * self.out_channels, 1, 1)
    }

    /// Trainable scalar count including both biases.
    pub fn param_count(&self) -> usize {
        [self.kgl_weight_shape(), self.kgl_bias_shape(), self.fc_weight_shape(), self.fc_bias_shape()]
            .iter()
            .map(Shape::numel)
            .sum()
    }

    /// Fan-in-uniform weights, zero biases, in `GuidedParams` order.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> [Tensor<T>; 4] {
        let gen_fan = self.image_channels * self.gen_ksize * self.gen_ksize;
        [
            fan_in_uniform(rng, self.kgl_weight_shape(), gen_fan),
            Tensor::zeros(self.kgl_bias_shape()),
            fan_in_uniform(rng, self.fc_weight_shape(), self.image_channels),
            Tensor::zeros(self.fc_bias_shape()),
        ]
    }

    /// Channel-wise kernels `W'` from the image feature, as a
    /// `[n, M*K^2, H, W]` node.
    pub fn generate_channelwise<T: Real>(
        &self,
        g: &mut Graph<T>,
        image: Var,
        params: &GuidedParams,
        target: Shape,
    ) -> Result<Var> {
        let is = g.shape(image);
        if is.h() != target.h() || is.w() != target.w() || is.n() != target.n() {
            return Err(Error::ShapeMismatch {
                op: "generate_channelwise_kernels",
                lhs: is,
                rhs: target,
            });
        }
        if target.c() != self.depth_channels {
            return Err(Error::ShapeMismatch {
                op: "generate_channelwise_kernels",
                lhs: Shape::new(target.n(), self.depth_channels, target.h(), target.w()),
                rhs: target,
            });
        }
        g.conv2d(image, params.kgl_weight, params.kgl_bias, ConvParams::same(self.gen_ksize))
    }

    /// Cross-channel kernels `W''`: global average pooling, then a
    /// fully-connected layer; a `[n, M*N, 1, 1]` node.
    pub fn generate_crosschannel<T: Real>(&self, g: &mut Graph<T>, image: Var, params: &GuidedParams) -> Result<Var> {
        let pooled = g.avg_pool_global(image)?;
        g.fully_connected(pooled, params.fc_weight, params.fc_bias)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        image: Var,
        depth: Var,
        params: &GuidedParams,
    ) -> Result<GuidedOutput> {
        let target = g.shape(depth);
        let channelwise_kernels = self.generate_channelwise(g, image, params, target)?;
        let crosschannel_kernels = self.generate_crosschannel(g, image, params)?;
        let intermediate = g.channelwise_variant_conv(depth, channelwise_kernels, self.ksize)?;
        let output = g.crosschannel_conv(intermediate, crosschannel_kernels, self.out_channels)?;
        Ok(GuidedOutput {
            output,
            channelwise_kernels,
            crosschannel_kernels,
            intermediate,
        })
    }
}
