use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gdc_core::cost;
use gdc_core::data::dataset::{synthesize, Dataset, SynthConfig};
use gdc_core::data::kitti::{self, read_depth_png, read_rgb};
use gdc_core::data::DepthMap;
use gdc_core::guided::ChannelwiseKernels;
use gdc_core::network::{FusionOp, FusionScheme, Model, NetConfig};
use gdc_core::selftest;
use gdc_core::tensor::checkpoint::Checkpoint;
use gdc_core::tensor::{Graph, Real};
use gdc_core::train::{self, run_ablation, AblationTable, LossMode, TrainConfig};
use gdc_core::viz;
use gdc_core::Error;

use crate::Failure;

type Outcome = Result<(), Failure>;

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("{s:?} is not HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("{v:?} is not a size"));
    Ok((p(h)?, p(w)?))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Seed of the scene layouts and sparse sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training scenes.
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    /// Validation scenes.
    #[arg(long, default_value_t = 64)]
    pub val_count: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Fewest sparse points per scene.
    #[arg(long, default_value_t = 256)]
    pub points_min: usize,
    /// Most sparse points per scene.
    #[arg(long, default_value_t = 400)]
    pub points_max: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs, _: &str) -> Outcome {
    let cfg = SynthConfig {
        seed: a.seed,
        train_count: a.count,
        val_count: a.val_count,
        height: a.height,
        width: a.width,
        points: (a.points_min, a.points_max),
    };
    synthesize(&cfg, &a.out)?;
    println!(
        "wrote {} train and {} val scenes ({}x{}) to {}",
        a.count,
        a.val_count,
        a.height,
        a.width,
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory holding train.tsv and val.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Bottom-anchored, horizontally centered crop applied on load, as HxW.
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<(usize, usize)>,
}

impl DataArgs {
    fn load(&self, split: &str) -> Result<Dataset, Error> {
        Dataset::load(&self.data.join(format!("{split}.tsv")), self.crop)
    }
}

#[derive(Args, Debug)]
pub struct NetArgs {
    /// Fusion scheme (de_guided, ee_guided, dd_guided, add, concat, first_guide, last_guide).
    #[arg(long, default_value = "de_guided")]
    pub fusion: FusionScheme,
    /// Feature widths per encoder stage; the count sets the depth.
    #[arg(long, default_value = "8,16,32", value_delimiter = ',')]
    pub channels: Vec<usize>,
    /// Guided kernel size.
    #[arg(long, default_value_t = 3)]
    pub ksize: usize,
    /// Constant multiplier on the network output.
    #[arg(long, default_value_t = 10.0)]
    pub output_scale: f64,
}

impl NetArgs {
    fn config(&self, fusion: FusionScheme, dims: (usize, usize)) -> NetConfig {
        NetConfig {
            stage_count: self.channels.len(),
            channels: self.channels.clone(),
            ksize: self.ksize,
            fusion,
            input_height: dims.0,
            input_width: dims.1,
            image_channels: 3,
            output_scale: self.output_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Sum,
    Mean,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    /// Seed of initialization and data order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// L2 coefficient added to gradients.
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    /// Iterations between learning-rate halvings.
    #[arg(long, default_value_t = 2000)]
    pub lr_period: usize,
    /// Squared-error reduction over valid pixels.
    #[arg(long, value_enum, default_value_t = LossArg::Mean)]
    pub loss: LossArg,
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            weight_decay: self.weight_decay,
            lr_period: self.lr_period,
            batch_size: self.batch_size,
            max_iters: self.iters,
            seed: self.seed,
            loss_mode: match self.loss {
                LossArg::Sum => LossMode::Sum,
                LossArg::Mean => LossMode::Mean,
            },
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn header_pairs(header: &str, precision: Precision) -> Vec<(String, String)> {
    let mut pairs = vec![("header".to_string(), header.trim_start_matches("# ").to_string())];
    pairs.push(("precision".into(), format!("{precision:?}").to_lowercase()));
    pairs
}

fn train_typed<T: Real>(a: &TrainArgs, header: &str, tr: &Dataset, va: &Dataset) -> Outcome {
    let dims = tr.dims().expect("nonempty");
    let net = a.net.config(a.net.fusion, dims);
    let mut model = Model::<T>::build(net, a.train.seed)?;
    let cfg = a.train.config();
    let val = (!va.is_empty()).then_some(va);
    let out = train::train(
        &mut model,
        tr,
        val,
        &cfg,
        Some(&a.out),
        &header_pairs(header, a.train.precision),
    )?;
    let last = out.losses.last().expect("at least one iteration");
    println!("final loss {:.6} at iteration {}", last.loss, last.iter);
    if out.skipped_steps > 0 {
        println!("skipped {} steps with non-finite gradients", out.skipped_steps);
    }
    if let Some(r) = out.val {
        print!("{}", r.to_kv());
    }
    Ok(())
}

pub fn train(a: &TrainArgs, header: &str) -> Outcome {
    let tr = a.data.load("train")?;
    let va = a.data.load("val")?;
    match a.train.precision {
        Precision::F32 => train_typed::<f32>(a, header, &tr, &va),
        Precision::F64 => train_typed::<f64>(a, header, &tr, &va),
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Comma-separated schemes to compare.
    #[arg(long, default_value = "de_guided,concat,add", value_delimiter = ',')]
    pub schemes: Vec<FusionScheme>,
    /// Seeds per scheme, counted up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Total seeds to reach when the first scheme loses to another on any
    /// single seed; no rerun when not above --seeds.
    #[arg(long, default_value_t = 5)]
    pub rerun_seeds: u64,
    /// Output directory for the table and per-run directories.
    #[arg(long)]
    pub out: PathBuf,
}

fn ablate_typed<T: Real>(a: &AblateArgs, tr: &Dataset, va: &Dataset) -> Result<AblationTable, Error> {
    let dims = tr.dims().expect("nonempty");
    let net = a.net.config(a.schemes[0], dims);
    let cfg = a.train.config();
    let first: Vec<u64> = (a.train.seed..a.train.seed + a.seeds).collect();
    let mut table = run_ablation::<T>(&a.schemes, &net, &cfg, &first, tr, va, Some(&a.out))?;
    let (winner, rivals) = (a.schemes[0], &a.schemes[1..]);
    let violations = table.seed_violations(winner, rivals);
    if !violations.is_empty() && a.rerun_seeds > a.seeds {
        println!(
            "{winner} lost on seeds {violations:?}; extending to {} seeds",
            a.rerun_seeds
        );
        let extra: Vec<u64> = (a.train.seed + a.seeds..a.train.seed + a.rerun_seeds).collect();
        table.merge(run_ablation::<T>(&a.schemes, &net, &cfg, &extra, tr, va, Some(&a.out))?)?;
    }
    Ok(table)
}

pub fn ablate(a: &AblateArgs, header: &str) -> Outcome {
    if a.schemes.len() < 2 {
        return Err(Error::invalid("ablate", "needs at least two schemes").into());
    }
    let tr = a.data.load("train")?;
    let va = a.data.load("val")?;
    let table = match a.train.precision {
        Precision::F32 => ablate_typed::<f32>(a, &tr, &va)?,
        Precision::F64 => ablate_typed::<f64>(a, &tr, &va)?,
    };
    let (winner, rivals) = (a.schemes[0], &a.schemes[1..]);
    let mut verdict = format!("{header}\n");
    let _ = writeln!(verdict, "seeds={:?}", table.seeds);
    let _ = writeln!(verdict, "winner={winner}");
    let _ = writeln!(
        verdict,
        "rivals={}",
        rivals.iter().map(|r| r.name()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(verdict, "seed_violations={:?}", table.seed_violations(winner, rivals));
    let _ = writeln!(verdict, "mean_ordering_holds={}", table.mean_beats(winner, rivals).unwrap_or(false));
    let rendered = table.render();
    write(&a.out.join("ablation.txt"), &format!("{header}\n{rendered}"))?;
    write(&a.out.join("ablation.csv"), &table.csv())?;
    write(&a.out.join("verdict.txt"), &verdict)?;
    print!("{rendered}{}", verdict.split_once('\n').map_or("", |v| v.1));
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of image, sparse and ground-truth paths.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Bottom-anchored, horizontally centered crop applied on load, as HxW.
    #[arg(long, value_parser = parse_size)]
    pub crop: Option<(usize, usize)>,
    /// Directory for metrics.txt and metrics.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<Model<f32>, Error> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn eval(a: &EvalArgs, header: &str) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.manifest, a.crop)?;
    let report = train::evaluate_model(&model, &data)?;
    print!("{}", report.to_kv());
    if let Some(dir) = &a.out {
        write(&dir.join("metrics.txt"), &format!("{header}\n{}", report.to_kv()))?;
        write(&dir.join("metrics.json"), &report.to_json())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 8-bit RGB guidance image (PNG or PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// 16-bit sparse depth PNG.
    #[arg(long)]
    pub sparse: PathBuf,
    /// Output 16-bit depth PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional colorized copy of the output.
    #[arg(long)]
    pub color: Option<PathBuf>,
}

fn predict_depth(model: &Model<f32>, image: &Path, sparse: &Path) -> Result<DepthMap, Error> {
    let img = read_rgb(image)?;
    let sp = read_depth_png(sparse)?;
    if (img.height, img.width) != (sp.height, sp.width) {
        return Err(Error::invalid(
            "complete",
            format!("image {}x{} vs sparse {}x{}", img.height, img.width, sp.height, sp.width),
        ));
    }
    let pred = model.predict(&img.to_tensor(), &sp.to_tensor())?;
    if !pred.all_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    let max = kitti::raw_to_meters(u16::MAX);
    let values = pred.data().iter().map(|&v| v.min(max)).collect();
    DepthMap::from_meters(img.height, img.width, values)
}

pub fn complete(a: &CompleteArgs, _: &str) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let depth = predict_depth(&model, &a.image, &a.sparse)?;
    // Depths below one raw step would encode as the invalid code.
    let lo = kitti::raw_to_meters(1);
    let values = depth.values.iter().zip(&depth.valid).map(|(&v, &ok)| if ok { v.max(lo) } else { 0.0 }).collect();
    let depth = DepthMap::from_meters(depth.height, depth.width, values)?;
    kitti::write_depth_png(&a.out, &depth)?;
    if let Some(c) = &a.color {
        viz::depth_to_color(&depth, None).write_png(c)?;
    }
    let (lo, hi) = depth.min_max_valid().unwrap_or((0.0, 0.0));
    println!(
        "wrote {} ({} of {} pixels valid, {lo:.2}..{hi:.2} m)",
        a.out.display(),
        depth.valid_count(),
        depth.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Input channels.
    #[arg(long = "M")]
    pub m: u64,
    /// Output channels.
    #[arg(long = "N")]
    pub n: u64,
    /// Kernel size.
    #[arg(long = "K", default_value_t = 3)]
    pub k: u64,
    /// Feature-map height.
    #[arg(long = "H")]
    pub h: u64,
    /// Feature-map width.
    #[arg(long = "B")]
    pub b: u64,
    #[arg(long, default_value_t = 4)]
    pub bytes_per_elem: u64,
    /// Append the CSV row (with header when the file is new).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also allocate and run both paths, reporting measured kernel bytes.
    #[arg(long)]
    pub measure: bool,
    /// Seed of the measurement inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cost(a: &CostArgs, _: &str) -> Outcome {
    let r = cost::analyze(a.m, a.n, a.k, a.h, a.b, a.bytes_per_elem)?;
    print!("{}", r.table());
    println!("GB columns: 2^30 bytes per GB, then 10^9 bytes per GB.");
    if let Some(path) = &a.csv {
        let mut text = if path.exists() {
            fs::read_to_string(path).map_err(|e| Error::io(path, e))?
        } else {
            format!("{}\n", cost::CSV_HEADER)
        };
        text += &r.csv_row();
        text.push('\n');
        write(path, &text)?;
    }
    if a.measure {
        let size = |v: u64| usize::try_from(v).map_err(|_| Error::invalid("cost", "dimension too large"));
        let m = cost::measure(size(a.m)?, size(a.n)?, size(a.k)?, size(a.h)?, size(a.b)?, a.seed)?;
        println!("{}", m.summary());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub sparse: PathBuf,
    /// Fusion level whose guided kernels are shown (1 is the finest).
    #[arg(long, default_value_t = 1)]
    pub stage: usize,
    /// Depth channel of the kernels.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Magnitude percentile mapped to full saturation.
    #[arg(long, default_value_t = 99.0)]
    pub percentile: f64,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn viz_kernels(a: &VizArgs, _: &str) -> Outcome {
    if !(0.0..=100.0).contains(&a.percentile) {
        return Err(Error::invalid("viz-kernels", "percentile must lie in [0, 100]").into());
    }
    let model = load_model(&a.checkpoint)?;
    let img = read_rgb(&a.image)?;
    let sp = read_depth_png(&a.sparse)?;
    let mut g = Graph::new();
    let i = g.constant(img.to_tensor());
    let s = g.constant(sp.to_tensor());
    let out = model.forward(&mut g, i, s, false)?;
    let site = out.trace.fusions.iter().find(|f| f.level == a.stage).ok_or_else(|| {
        Error::invalid("viz-kernels", format!("no fusion at level {}", a.stage))
    })?;
    let kernels = match (site.op, site.channelwise_kernels) {
        (FusionOp::Guided, Some(k)) => k,
        _ => {
            return Err(Error::invalid(
                "viz-kernels",
                format!("level {} fuses by {:?}, not guided convolution", a.stage, site.op),
            )
            .into())
        }
    };
    let kernels = ChannelwiseKernels::new(g.value(kernels).clone(), model.config().ksize)?;
    let field = viz::kernels_to_field(&kernels, 0, a.channel)?;
    viz::field_to_color(&field, a.percentile).write_png(&a.out)?;
    println!(
        "wrote {} ({}x{}, level {}, channel {})",
        a.out.display(),
        field.height,
        field.width,
        a.stage,
        a.channel
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random shapes per differentiable operation.
    #[arg(long, default_value_t = 20)]
    pub trials: u64,
    /// Random configurations for the factorization identity.
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
}

pub fn selftest(a: &SelftestArgs, _: &str) -> Outcome {
    let mut groups = vec![
        selftest::factorization_identity::<f64>(a.configs, a.seed)?,
        selftest::factorization_identity::<f32>(a.configs, a.seed)?,
        selftest::depthwise_reduction(a.seed)?,
    ];
    groups.extend(selftest::gradient_suite(a.trials, a.seed)?);
    groups.push(selftest::cost_example());
    let mut failed = Vec::new();
    for g in &groups {
        let status = if g.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {:<40} cases={:<4} worst={:.3e} tol={:.0e}{}",
            g.name,
            g.cases,
            g.worst,
            g.tolerance,
            if g.detail.is_empty() { String::new() } else { format!(" ({})", g.detail) }
        );
        if !g.passed() {
            failed.push(g.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::SelfTest(format!("failed groups: {}", failed.join(", "))))
    }
}
