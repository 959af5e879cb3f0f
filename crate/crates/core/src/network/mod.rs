//! Two-branch encoder-decoder completion network.
//!
//! The image branch (guide) and the sparse-depth branch share a level
//! structure: level 0 is full resolution, level `i` is downsampled by `2^i`.
//! Each encoder step is a stride-2 residual block; each decoder step is a
//! stride-2 transposed convolution whose output is added to the encoder
//! feature of the same level. Image features are fused into the depth
//! branch at levels `1..=S` according to the [`FusionScheme`].

mod config;

use rand::Rng;

pub use config::{FusionOp, FusionScheme, NetConfig};

use crate::error::{Error, Result};
use crate::guided::{GuidedConv, GuidedParams};
use crate::rng::stream;
use crate::tensor::checkpoint::{Checkpoint, NamedArray};
use crate::tensor::init::fan_in_uniform;
use crate::tensor::ops::{BatchStats, BN_MOMENTUM};
use crate::tensor::{ConvParams, DeconvParams, Graph, ParamId, ParamKind, ParamStore, Real, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    p: ConvParams,
}

#[derive(Debug, Clone, Copy)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone, Copy)]
struct Up {
    w: ParamId,
    p: DeconvParams,
    bn: BatchNorm,
}

#[derive(Debug, Clone, Copy)]
enum Fusion {
    Guided {
        module: GuidedConv,
        kgl_w: ParamId,
        kgl_b: ParamId,
        fc_w: ParamId,
        fc_b: ParamId,
        bn: BatchNorm,
    },
    Add {
        bn: BatchNorm,
    },
    Concat {
        conv: Conv,
        bn: BatchNorm,
    },
}

struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let w = self.store.add(
            format!("{name}.w"),
            fan_in_uniform(self.rng, [cout, cin, k, k], cin * k * k),
            ParamKind::Trainable,
        );
        let b = bias.then(|| self.store.add(format!("{name}.b"), Tensor::zeros([1, cout, 1, 1]), ParamKind::Trainable));
        Conv {
            w,
            b,
            p: ConvParams::new(stride, k / 2),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones([1, c, 1, 1]), ParamKind::Trainable),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]), ParamKind::Trainable),
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros([1, c, 1, 1]), ParamKind::Buffer),
            var: self.store.add(format!("{name}.running_var"), Tensor::ones([1, c, 1, 1]), ParamKind::Buffer),
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, stride, false),
            bn: self.bn(&format!("{name}.bn"), cout),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ResBlock {
        let a = self.conv_bn(&format!("{name}.a"), cin, cout, 3, stride);
        let b = self.conv_bn(&format!("{name}.b"), cout, cout, 3, 1);
        let shortcut = (cin != cout || stride != 1).then(|| self.conv_bn(&format!("{name}.short"), cin, cout, 1, stride));
        ResBlock { a, b, shortcut }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Up {
        let w = self.store.add(
            format!("{name}.deconv.w"),
            fan_in_uniform(self.rng, [cin, cout, 3, 3], cin * 9),
            ParamKind::Trainable,
        );
        Up {
            w,
            p: DeconvParams::upsample(3, 2),
            bn: self.bn(&format!("{name}.bn"), cout),
        }
    }

    fn fusion(&mut self, name: &str, op: FusionOp, c: usize, ksize: usize) -> Fusion {
        match op {
            FusionOp::Guided => {
                let module = GuidedConv::new(c, c, c, ksize);
                let [kw, kb, fw, fb] = module.init_params::<T, R>(self.rng);
                Fusion::Guided {
                    module,
                    kgl_w: self.store.add(format!("{name}.kgl.w"), kw, ParamKind::Trainable),
                    kgl_b: self.store.add(format!("{name}.kgl.b"), kb, ParamKind::Trainable),
                    fc_w: self.store.add(format!("{name}.fc.w"), fw, ParamKind::Trainable),
                    fc_b: self.store.add(format!("{name}.fc.b"), fb, ParamKind::Trainable),
                    bn: self.bn(&format!("{name}.bn"), c),
                }
            }
            FusionOp::Add => Fusion::Add {
                bn: self.bn(&format!("{name}.bn"), c),
            },
            FusionOp::Concat => Fusion::Concat {
                conv: self.conv(&format!("{name}.mix"), 2 * c, c, 1, 1, false),
                bn: self.bn(&format!("{name}.bn"), c),
            },
        }
    }
}

/// One fusion site recorded during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionSite {
    pub level: usize,
    pub op: FusionOp,
    /// Image-branch feature read by the fusion.
    pub guide_input: Var,
    /// Depth-branch feature the fusion transforms.
    pub depth_input: Var,
    pub output: Var,
    /// Per-pixel kernels, for guided fusions.
    pub channelwise_kernels: Option<Var>,
}

/// Graph nodes of the main features, indexed by level.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub guide_encoder: Vec<Var>,
    /// `None` at level 0 and for schemes without an image decoder.
    pub guide_decoder: Vec<Option<Var>>,
    /// Depth encoder outputs after fusion, levels `0..=S`.
    pub depth_encoder: Vec<Var>,
    /// Depth decoder outputs after fusion, levels `0..=S`.
    pub depth_decoder: Vec<Var>,
    pub fusions: Vec<FusionSite>,
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    /// `[n, 1, H, W]` depth in meters.
    pub depth: Var,
    /// Bound parameter leaves, indexed by [`ParamId::index`].
    pub params: Vec<Var>,
    /// Batch statistics of every normalization, training mode only.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: NetConfig,
    store: ParamStore<T>,
    bns: Vec<BatchNorm>,
    guide_in: ConvBn,
    guide_enc: Vec<ResBlock>,
    guide_dec_top: Option<ResBlock>,
    guide_dec: Vec<Up>,
    depth_in: ConvBn,
    depth_enc: Vec<ResBlock>,
    fusions: Vec<Fusion>,
    depth_dec_top: ResBlock,
    depth_dec: Vec<Up>,
    depth_out: Conv,
}

struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    store: &'a ParamStore<T>,
    training: bool,
    stats: Vec<(usize, BatchStats<T>)>,
    bns: &'a [BatchNorm],
}

impl<T: Real> Ctx<'_, T> {
    fn v(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let (w, b) = (self.v(c.w), c.b.map(|b| self.v(b)));
        self.g.conv2d(x, w, b, c.p)
    }

    fn bn(&mut self, bn: &BatchNorm, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.v(bn.gamma), self.v(bn.beta));
        if self.training {
            let (y, stats) = self.g.batch_norm_train(x, gamma, beta)?;
            let idx = self
                .bns
                .iter()
                .position(|b| b.gamma == bn.gamma)
                .expect("normalization registered at build time");
            self.stats.push((idx, stats));
            Ok(y)
        } else {
            let mean = self.store.get(bn.mean).data().to_vec();
            let var = self.store.get(bn.var).data().to_vec();
            self.g.batch_norm_eval(x, gamma, beta, &mean, &var)
        }
    }

    fn conv_bn(&mut self, c: &ConvBn, x: Var) -> Result<Var> {
        let y = self.conv(&c.conv, x)?;
        self.bn(&c.bn, y)
    }

    fn conv_bn_relu(&mut self, c: &ConvBn, x: Var) -> Result<Var> {
        let y = self.conv_bn(c, x)?;
        Ok(self.g.relu(y))
    }

    fn res_block(&mut self, r: &ResBlock, x: Var) -> Result<Var> {
        let a = self.conv_bn_relu(&r.a, x)?;
        let b = self.conv_bn(&r.b, a)?;
        let short = match &r.shortcut {
            Some(s) => self.conv_bn(s, x)?,
            None => x,
        };
        let sum = self.g.add(b, short)?;
        Ok(self.g.relu(sum))
    }

    /// `relu(bn(deconv(x))) + skip`.
    fn up(&mut self, u: &Up, x: Var, skip: Var) -> Result<Var> {
        let w = self.v(u.w);
        let y = self.g.deconv2d(x, w, None, u.p)?;
        let y = self.bn(&u.bn, y)?;
        let y = self.g.relu(y);
        self.g.add(y, skip)
    }

    fn fuse(&mut self, f: &Fusion, level: usize, guide: Var, depth: Var) -> Result<FusionSite> {
        let (op, pre, kernels) = match f {
            Fusion::Guided {
                module,
                kgl_w,
                kgl_b,
                fc_w,
                fc_b,
                ..
            } => {
                let params = GuidedParams {
                    kgl_weight: self.v(*kgl_w),
                    kgl_bias: Some(self.v(*kgl_b)),
                    fc_weight: self.v(*fc_w),
                    fc_bias: Some(self.v(*fc_b)),
                };
                let out = module.forward(self.g, guide, depth, &params)?;
                (FusionOp::Guided, out.output, Some(out.channelwise_kernels))
            }
            Fusion::Add { .. } => (FusionOp::Add, self.g.add(depth, guide)?, None),
            Fusion::Concat { conv, .. } => {
                let cat = self.g.concat(depth, guide)?;
                (FusionOp::Concat, self.conv(conv, cat)?, None)
            }
        };
        let bn = match f {
            Fusion::Guided { bn, .. } | Fusion::Add { bn } | Fusion::Concat { bn, .. } => bn,
        };
        let y = self.bn(bn, pre)?;
        let output = self.g.relu(y);
        Ok(FusionSite {
            level,
            op,
            guide_input: guide,
            depth_input: depth,
            output,
            channelwise_kernels: kernels,
        })
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "network-init");
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let s = config.stage_count;
        let ch = |l: usize| config.level_channels(l);

        let guide_in = b.conv_bn("guide.in", config.image_channels, ch(0), 3, 1);
        let guide_enc: Vec<ResBlock> = (1..=s).map(|l| b.res_block(&format!("guide.enc{l}"), ch(l - 1), ch(l), 2)).collect();
        let (guide_dec_top, guide_dec) = if config.fusion.has_guide_decoder() {
            let top = b.res_block(&format!("guide.dec{s}"), ch(s), ch(s), 1);
            let ups = (1..s).rev().map(|l| b.up(&format!("guide.dec{l}"), ch(l + 1), ch(l))).collect();
            (Some(top), ups)
        } else {
            (None, Vec::new())
        };

        let depth_in = b.conv_bn("depth.in", 1, ch(0), 3, 1);
        let depth_enc: Vec<ResBlock> = (1..=s).map(|l| b.res_block(&format!("depth.enc{l}"), ch(l - 1), ch(l), 2)).collect();
        let fusions: Vec<Fusion> = (1..=s)
            .map(|l| b.fusion(&format!("fuse{l}"), config.fusion.operator(l, s), ch(l), config.ksize))
            .collect();
        let depth_dec_top = b.res_block(&format!("depth.dec{s}"), ch(s), ch(s), 1);
        let depth_dec: Vec<Up> = (0..s).rev().map(|l| b.up(&format!("depth.dec{l}"), ch(l + 1), ch(l))).collect();
        let depth_out = b.conv("depth.out", ch(0), 1, 3, 1, true);

        let mut bns = Vec::new();
        for e in store.entries() {
            if let Some(prefix) = e.name.strip_suffix(".gamma") {
                let id = |suffix: &str| store.find(&format!("{prefix}.{suffix}")).expect("registered together");
                bns.push(BatchNorm {
                    gamma: id("gamma"),
                    beta: id("beta"),
                    mean: id("running_mean"),
                    var: id("running_var"),
                });
            }
        }
        Ok(Model {
            config,
            store,
            bns,
            guide_in,
            guide_enc,
            guide_dec_top,
            guide_dec,
            depth_in,
            depth_enc,
            fusions,
            depth_dec_top,
            depth_dec,
            depth_out,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Runs both branches on `image` `[n, C, H, W]` and `sparse` `[n, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, sparse: Var, training: bool) -> Result<ForwardOutput<T>> {
        let (is, ss) = (g.shape(image), g.shape(sparse));
        if is.n() != ss.n() || is.h() != ss.h() || is.w() != ss.w() || ss.c() != 1 || is.c() != self.config.image_channels {
            return Err(Error::ShapeMismatch {
                op: "network forward",
                lhs: is,
                rhs: ss,
            });
        }
        self.config.check_resolution(is.h(), is.w())?;
        let vars = self.store.bind(g);
        let mut cx = Ctx {
            g,
            vars: &vars,
            store: &self.store,
            training,
            stats: Vec::new(),
            bns: &self.bns,
        };
        let s = self.config.stage_count;
        let scheme = self.config.fusion;
        let mut trace = ForwardTrace::default();

        // Image branch.
        let mut e = cx.conv_bn_relu(&self.guide_in, image)?;
        trace.guide_encoder.push(e);
        for r in &self.guide_enc {
            e = cx.res_block(r, e)?;
            trace.guide_encoder.push(e);
        }
        trace.guide_decoder = vec![None; s + 1];
        if let Some(top) = &self.guide_dec_top {
            let mut d = cx.res_block(top, trace.guide_encoder[s])?;
            trace.guide_decoder[s] = Some(d);
            for (up, level) in self.guide_dec.iter().zip((1..s).rev()) {
                d = cx.up(up, d, trace.guide_encoder[level])?;
                trace.guide_decoder[level] = Some(d);
            }
        }
        let guide_at = |level: usize| -> Var {
            match scheme {
                FusionScheme::EeGuided => trace.guide_encoder[level],
                _ => trace.guide_decoder[level].expect("decoder present"),
            }
        };
        let guides: Vec<Var> = (0..=s).map(|l| if l == 0 { image } else { guide_at(l) }).collect();

        // Depth encoder.
        let mut x = cx.conv_bn_relu(&self.depth_in, sparse)?;
        trace.depth_encoder.push(x);
        for (i, r) in self.depth_enc.iter().enumerate() {
            let level = i + 1;
            x = cx.res_block(r, x)?;
            if !scheme.fuses_in_decoder() {
                let site = cx.fuse(&self.fusions[i], level, guides[level], x)?;
                trace.fusions.push(site);
                x = site.output;
            }
            trace.depth_encoder.push(x);
        }

        // Depth decoder.
        trace.depth_decoder = vec![x; s + 1];
        let mut q = cx.res_block(&self.depth_dec_top, x)?;
        for (step, level) in (0..=s).rev().enumerate() {
            if step > 0 {
                q = cx.up(&self.depth_dec[step - 1], q, trace.depth_encoder[level])?;
            }
            if scheme.fuses_in_decoder() && level >= 1 {
                let site = cx.fuse(&self.fusions[level - 1], level, guides[level], q)?;
                trace.fusions.push(site);
                q = site.output;
            }
            trace.depth_decoder[level] = q;
        }
        let out = cx.conv(&self.depth_out, q)?;
        let depth = cx.g.scale(out, T::from_f64_lossy(self.config.output_scale));
        let bn_stats = cx.stats;
        trace.fusions.sort_by_key(|f| f.level);
        Ok(ForwardOutput {
            depth,
            params: vars,
            bn_stats,
            trace,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - momentum;
        for (idx, st) in stats {
            let bn = self.bns[*idx];
            for (r, &b) in self.store.get_mut(bn.mean).data_mut().iter_mut().zip(&st.mean) {
                *r = keep * *r + momentum * b;
            }
            for (r, &b) in self.store.get_mut(bn.var).data_mut().iter_mut().zip(&st.var_unbiased) {
                *r = keep * *r + momentum * b;
            }
        }
    }

    /// Value-level inference in evaluation mode.
    pub fn predict(&self, image: &Tensor<T>, sparse: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let i = g.constant(image.clone());
        let s = g.constant(sparse.clone());
        let out = self.forward(&mut g, i, s, false)?;
        Ok(g.value(out.depth).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            preamble: self.config.to_pairs(),
            arrays: self
                .store
                .entries()
                .iter()
                .map(|e| NamedArray::from_tensor(e.name.clone(), &e.value))
                .collect(),
        }
    }

    /// Rebuilds the architecture from the preamble and loads the weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = NetConfig::from_pairs(&ck.preamble)?;
        let mut model = Model::build(config, 0)?;
        let named = ck
            .arrays
            .iter()
            .map(|a| Ok((a.name.clone(), a.to_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        model.store.load_from(&named)?;
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            bns: self.bns.clone(),
            guide_in: self.guide_in,
            guide_enc: self.guide_enc.clone(),
            guide_dec_top: self.guide_dec_top,
            guide_dec: self.guide_dec.clone(),
            depth_in: self.depth_in,
            depth_enc: self.depth_enc.clone(),
            fusions: self.fusions.clone(),
            depth_dec_top: self.depth_dec_top,
            depth_dec: self.depth_dec.clone(),
            depth_out: self.depth_out,
        }
    }
}

/// Checks that every fusion reads image-decoder features and feeds the depth
/// encoder stream, as the decoder-to-encoder scheme requires.
pub fn verify_decoder_to_encoder<T: Real>(g: &Graph<T>, trace: &ForwardTrace, stages: usize) -> Result<()> {
    let fail = |reason: String| Err(Error::invalid("fusion topology", reason));
    if trace.fusions.len() != stages {
        return fail(format!("{} fusion sites for {stages} stages", trace.fusions.len()));
    }
    for site in &trace.fusions {
        let l = site.level;
        if site.op != FusionOp::Guided {
            return fail(format!("level {l} fuses with {:?}", site.op));
        }
        if trace.guide_decoder.get(l).copied().flatten() != Some(site.guide_input) {
            return fail(format!("level {l} does not read the image decoder"));
        }
        if trace.depth_encoder[l] != site.output {
            return fail(format!("level {l} does not write the depth encoder"));
        }
        if !g.depends_on(site.output, site.guide_input) || !g.depends_on(site.output, site.depth_input) {
            return fail(format!("level {l} output does not depend on both inputs"));
        }
        if !g.depends_on(site.depth_input, trace.depth_encoder[l - 1]) {
            return fail(format!("level {l} depth input is not downstream of level {}", l - 1));
        }
        if l < stages && !g.depends_on(trace.depth_encoder[l + 1], site.output) {
            return fail(format!("level {} encoder does not consume level {l} fusion", l + 1));
        }
        if trace.depth_encoder.iter().any(|&e| g.depends_on(site.guide_input, e)) {
            return fail(format!("level {l} image feature depends on the depth branch"));
        }
    }
    Ok(())
}

/// Shape of a network input batch.
pub fn input_shapes(config: &NetConfig, batch: usize) -> (Shape, Shape) {
    (
        Shape::new(batch, config.image_channels, config.input_height, config.input_width),
        Shape::new(batch, 1, config.input_height, config.input_width),
    )
}
