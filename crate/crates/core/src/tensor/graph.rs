//! Gradient tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and enough saved state to run its vector-Jacobian product. Inputs always
//! precede outputs, so [`Graph::backward`] is a single reverse sweep.

use super::conv::{conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward};
use super::ops::{self, BatchStats};
use super::{ConvParams, DeconvParams, Real, Shape, Tensor};
use crate::error::{Error, Result};
use crate::guided::kernels;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node, without its saved state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Deconv2d,
    BatchNorm,
    Relu,
    Add,
    Mul,
    Scale,
    Concat,
    AvgPoolGlobal,
    Linear,
    Sum,
    MaskedSquaredError,
    ChannelwiseVariantConv,
    CrossChannelConv,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvParams,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: DeconvParams,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        a: Var,
        b: Var,
    },
    AvgPoolGlobal {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sum {
        x: Var,
    },
    MaskedSquaredError {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        scale: T,
    },
    ChannelwiseVariant {
        s: Var,
        kernels: Var,
        ksize: usize,
    },
    CrossChannel {
        d: Var,
        kernels: Var,
        out_channels: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Deconv2d { .. } => OpKind::Deconv2d,
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::AvgPoolGlobal { .. } => OpKind::AvgPoolGlobal,
            Op::Linear { .. } => OpKind::Linear,
            Op::Sum { .. } => OpKind::Sum,
            Op::MaskedSquaredError { .. } => OpKind::MaskedSquaredError,
            Op::ChannelwiseVariant { .. } => OpKind::ChannelwiseVariantConv,
            Op::CrossChannel { .. } => OpKind::CrossChannelConv,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Deconv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Relu { x } | Op::Scale { x, .. } | Op::AvgPoolGlobal { x } | Op::Sum { x } => vec![x],
            Op::Add { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => vec![a, b],
            Op::MaskedSquaredError { pred, .. } => vec![pred],
            Op::ChannelwiseVariant { s, kernels, .. } => vec![s, kernels],
            Op::CrossChannel { d, kernels, .. } => vec![d, kernels],
        }
    }
}

/// Lazily allocated gradient buffers of the nodes preceding the one being
/// differentiated.
struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
    values: &'a [Tensor<T>],
    requires_grad: &'a [bool],
}

impl<T: Real> GradSink<'_, T> {
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let shape = self.values[v.0].shape();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    /// Two distinct slots at once.
    fn pair(&mut self, a: Var, b: Var) -> (Option<&mut [T]>, Option<&mut [T]>) {
        debug_assert_ne!(a, b);
        for v in [a, b] {
            if self.requires_grad[v.0] && self.grads[v.0].is_none() {
                self.grads[v.0] = Some(Tensor::zeros(self.values[v.0].shape()));
            }
        }
        let (lo, hi, swapped) = if a.0 < b.0 { (a, b, false) } else { (b, a, true) };
        let (head, tail) = self.grads.split_at_mut(hi.0);
        let lo_slot = if self.requires_grad[lo.0] {
            head[lo.0].as_mut().map(|t| t.data_mut())
        } else {
            None
        };
        let hi_slot = if self.requires_grad[hi.0] {
            tail[0].as_mut().map(|t| t.data_mut())
        } else {
            None
        };
        if swapped {
            (hi_slot, lo_slot)
        } else {
            (lo_slot, hi_slot)
        }
    }

    fn triple(
        &mut self,
        a: Var,
        b: Var,
        c: Option<Var>,
    ) -> (Option<&mut [T]>, Option<&mut [T]>, Option<&mut [T]>) {
        let mut vars = vec![a, b];
        vars.extend(c);
        for &v in &vars {
            if self.requires_grad[v.0] && self.grads[v.0].is_none() {
                self.grads[v.0] = Some(Tensor::zeros(self.values[v.0].shape()));
            }
        }
        let requires = self.requires_grad;
        let mut slots: Vec<(usize, Option<&mut [T]>)> = self
            .grads
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| vars.iter().any(|v| v.0 == *i))
            .map(|(i, g)| (i, if requires[i] { g.as_mut().map(|t| t.data_mut()) } else { None }))
            .collect();
        let mut take = |v: Var| {
            slots
                .iter_mut()
                .find(|(i, _)| *i == v.0)
                .and_then(|(_, s)| s.take())
        };
        let ga = take(a);
        let gb = take(b);
        let gc = c.and_then(&mut take);
        (ga, gb, gc)
    }
}

/// Reverse-mode tape. One graph is built per forward pass.
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(Op::Leaf);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.ops[v.0].kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs()
    }

    /// Whether `ancestor` is reachable from `v` by following op inputs.
    pub fn depends_on(&self, v: Var, ancestor: Var) -> bool {
        if ancestor.0 > v.0 {
            return false;
        }
        let mut seen = vec![false; v.0 + 1];
        let mut stack = vec![v];
        while let Some(cur) = stack.pop() {
            if cur == ancestor {
                return true;
            }
            if seen[cur.0] {
                continue;
            }
            seen[cur.0] = true;
            stack.extend(self.ops[cur.0].inputs().into_iter().filter(|i| i.0 >= ancestor.0));
        }
        false
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires = op.inputs().iter().any(|i| self.requires_grad[i.0]);
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires_grad.push(requires);
        Var(self.values.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, p }))
    }

    /// Transposed convolution; weight layout `[c_in, c_out, k, k]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: DeconvParams) -> Result<Var> {
        let y = deconv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        Ok(self.push(y, Op::Deconv2d { x, w, b, p }))
    }

    /// Training-mode batch normalization; returns the batch statistics for
    /// the caller's running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let (y, xhat, inv_std, stats) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let v = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (y, inv_std) = ops::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var)?;
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        ))
    }

    /// Batch normalization that updates `running` in training mode and reads
    /// it in inference mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut ops::RunningStats<T>,
        training: bool,
    ) -> Result<Var> {
        if training {
            let (y, stats) = self.batch_norm_train(x, gamma, beta)?;
            running.update(&stats, T::from_f64_lossy(ops::BN_MOMENTUM));
            Ok(y)
        } else {
            self.batch_norm_eval(x, gamma, beta, &running.mean, &running.var)
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu { x })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        for (o, &v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut y = self.value(a).clone();
        for (o, &v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    /// Per-channel spatial mean, `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool_global(self.value(x))?;
        Ok(self.push(y, Op::AvgPoolGlobal { x }))
    }

    /// Affine map of each flattened batch item; weight `[out, in, 1, 1]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// `scale * sum_{mask} (pred - target)^2`.
    pub fn masked_squared_error(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool], scale: T) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_mse_loss",
                lhs: p.shape(),
                rhs: target.shape(),
            });
        }
        if mask.len() != p.len() {
            return Err(Error::invalid(
                "masked_mse_loss",
                format!("mask has {} entries for {} predictions", mask.len(), p.len()),
            ));
        }
        let mut acc = T::zero();
        for ((&pv, &tv), &m) in p.data().iter().zip(target.data()).zip(mask) {
            if m {
                let d = pv - tv;
                acc += d * d;
            }
        }
        let y = Tensor::scalar(acc * scale);
        Ok(self.push(
            y,
            Op::MaskedSquaredError {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                scale,
            },
        ))
    }

    /// Spatially-variant depthwise convolution with per-pixel kernels laid
    /// out as `[n, c*k*k, h, w]`.
    pub fn channelwise_variant_conv(&mut self, s: Var, kernels: Var, ksize: usize) -> Result<Var> {
        let y = kernels::channelwise_forward(self.value(s), self.value(kernels), ksize)?;
        Ok(self.push(y, Op::ChannelwiseVariant { s, kernels, ksize }))
    }

    /// Per-image 1x1 channel mixing with kernels laid out as `[n, c*out, 1, 1]`.
    pub fn crosschannel_conv(&mut self, d: Var, kernels: Var, out_channels: usize) -> Result<Var> {
        let y = kernels::crosschannel_forward(self.value(d), self.value(kernels), out_channels)?;
        Ok(self.push(
            y,
            Op::CrossChannel {
                d,
                kernels,
                out_channels,
            },
        ))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Populates gradients of every `requires_grad` node reachable from
    /// `loss`. Earlier gradients on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let (head, _) = self.grads.split_at_mut(i);
            let mut sink = GradSink {
                grads: head,
                values: &self.values,
                requires_grad: &self.requires_grad,
            };
            backprop(&self.ops[i], &self.values[i], &self.values, &gout, &mut sink);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn backprop<T: Real>(op: &Op<T>, out: &Tensor<T>, values: &[Tensor<T>], g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
    let val = |v: Var| &values[v.0];
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, p } => {
            let (gx, gw, gb) = sink.triple(*x, *w, *b);
            conv2d_backward(val(*x), val(*w), *p, g, gx, gw, gb);
        }
        Op::Deconv2d { x, w, b, p } => {
            let (gx, gw, gb) = sink.triple(*x, *w, *b);
            deconv2d_backward(val(*x), val(*w), *p, g, gx, gw, gb);
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (gx, gg, gb) = sink.triple(*x, *gamma, Some(*beta));
            ops::batch_norm_train_backward(val(*x).shape(), val(*gamma), xhat, inv_std, g, gx, gg, gb);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let xs = val(*x);
            let s = xs.shape();
            let plane = s.plane();
            let gamma_v = val(*gamma).data();
            let (gx, gg, gb) = sink.triple(*x, *gamma, Some(*beta));
            if let Some(gx) = gx {
                for (i, (o, &d)) in gx.iter_mut().zip(g.data()).enumerate() {
                    let c = (i / plane) % s.c();
                    *o += d * gamma_v[c] * inv_std[c];
                }
            }
            if let Some(gg) = gg {
                for (i, (&d, &xv)) in g.data().iter().zip(xs.data()).enumerate() {
                    let c = (i / plane) % s.c();
                    gg[c] += d * (xv - mean[c]) * inv_std[c];
                }
            }
            if let Some(gb) = gb {
                for (i, &d) in g.data().iter().enumerate() {
                    gb[(i / plane) % s.c()] += d;
                }
            }
        }
        Op::Relu { x } => {
            if let Some(gx) = sink.slot(*x) {
                for ((o, &d), &y) in gx.iter_mut().zip(g.data()).zip(out.data()) {
                    if y > T::zero() {
                        *o += d;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if a == b {
                if let Some(ga) = sink.slot(*a) {
                    for (o, &d) in ga.iter_mut().zip(g.data()) {
                        *o += d + d;
                    }
                }
                return;
            }
            let (ga, gb) = sink.pair(*a, *b);
            for dst in [ga, gb].into_iter().flatten() {
                for (o, &d) in dst.iter_mut().zip(g.data()) {
                    *o += d;
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if a == b {
                if let Some(ga) = sink.slot(*a) {
                    for ((o, &d), &x) in ga.iter_mut().zip(g.data()).zip(av) {
                        *o += d * (x + x);
                    }
                }
                return;
            }
            let (ga, gb) = sink.pair(*a, *b);
            if let Some(ga) = ga {
                for ((o, &d), &y) in ga.iter_mut().zip(g.data()).zip(bv) {
                    *o += d * y;
                }
            }
            if let Some(gb) = gb {
                for ((o, &d), &x) in gb.iter_mut().zip(g.data()).zip(av) {
                    *o += d * x;
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = sink.slot(*x) {
                for (o, &d) in gx.iter_mut().zip(g.data()) {
                    *o += d * *factor;
                }
            }
        }
        Op::Concat { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (la, lb) = (sa.item_len(), sb.item_len());
            if a == b {
                if let Some(ga) = sink.slot(*a) {
                    for n in 0..sa.n() {
                        let src = &g.data()[n * (la + lb)..(n + 1) * (la + lb)];
                        for (i, o) in ga[n * la..(n + 1) * la].iter_mut().enumerate() {
                            *o += src[i] + src[la + i];
                        }
                    }
                }
                return;
            }
            let (ga, gb) = sink.pair(*a, *b);
            if let Some(ga) = ga {
                for n in 0..sa.n() {
                    let src = &g.data()[n * (la + lb)..][..la];
                    for (o, &d) in ga[n * la..(n + 1) * la].iter_mut().zip(src) {
                        *o += d;
                    }
                }
            }
            if let Some(gb) = gb {
                for n in 0..sa.n() {
                    let src = &g.data()[n * (la + lb) + la..][..lb];
                    for (o, &d) in gb[n * lb..(n + 1) * lb].iter_mut().zip(src) {
                        *o += d;
                    }
                }
            }
        }
        Op::AvgPoolGlobal { x } => {
            let plane = val(*x).shape().plane();
            let inv = T::one() / T::from_usize(plane).unwrap();
            if let Some(gx) = sink.slot(*x) {
                for (chunk, &d) in gx.chunks_mut(plane).zip(g.data()) {
                    for o in chunk {
                        *o += d * inv;
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (gx, gw, gb) = sink.triple(*x, *w, *b);
            ops::linear_backward(val(*x), val(*w), g, gx, gw, gb);
        }
        Op::Sum { x } => {
            let d = g.data()[0];
            if let Some(gx) = sink.slot(*x) {
                for o in gx {
                    *o += d;
                }
            }
        }
        Op::MaskedSquaredError {
            pred,
            target,
            mask,
            scale,
        } => {
            let d = g.data()[0];
            let pv = val(*pred).data();
            if let Some(gp) = sink.slot(*pred) {
                let two = T::one() + T::one();
                for (i, o) in gp.iter_mut().enumerate() {
                    if mask[i] {
                        *o += d * *scale * two * (pv[i] - target[i]);
                    }
                }
            }
        }
        Op::ChannelwiseVariant { s, kernels: k, ksize } => {
            let (gs, gk) = sink.pair(*s, *k);
            kernels::channelwise_backward(val(*s), val(*k), *ksize, g, gs, gk);
        }
        Op::CrossChannel {
            d,
            kernels: k,
            out_channels,
        } => {
            let (gd, gk) = sink.pair(*d, *k);
            kernels::crosschannel_backward(val(*d), val(*k), *out_channels, g, gd, gk);
        }
    }
}
