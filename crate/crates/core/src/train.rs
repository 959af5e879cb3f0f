//! Masked squared-error training with Adam, run directories and the
//! fusion-scheme ablation driver.
//!
//! Run directory layout:
//!
//! ```text
//! config.txt                  key=value, network and training settings
//! loss.csv                    iter,loss,lr (loss before that iteration's update)
//! checkpoints/iter_N.gdc1     every `checkpoint_every` iterations and at the end
//! metrics_val.txt             validation report, key=value
//! metrics_val.json            the same report, nested
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::dataset::{epoch_order, Dataset};
use crate::data::kitti::write_bytes;
use crate::data::{Batch, SparseDepthSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_batch, EvalOptions, MetricReport};
use crate::network::{FusionScheme, Model, NetConfig};
use crate::rng::fnv1a;
use crate::tensor::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Sum of squared errors over valid pixels.
    Sum,
    /// The sum divided by the number of valid pixels.
    Mean,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Sum => "sum",
            LossMode::Mean => "mean",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(LossMode::Sum),
            "mean" => Ok(LossMode::Mean),
            _ => Err(Error::invalid("loss mode", format!("{s:?} is neither sum nor mean"))),
        }
    }
}

/// Squared error of `pred` against `gt` over the pixels where `mask` holds.
pub fn masked_mse_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, mask: &[bool], mode: LossMode) -> Result<Var> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::invalid("masked_mse_loss", "mask selects no pixel"));
    }
    let scale = match mode {
        LossMode::Sum => T::one(),
        LossMode::Mean => T::one() / T::from_f64_lossy(valid as f64),
    };
    g.masked_squared_error(pred, gt, mask, scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment estimates for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    /// Applied steps; skipped steps do not count.
    pub steps: u64,
    pub skipped: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let mut m = vec![None; params.len()];
        for id in params.trainable_ids() {
            m[id.index()] = Some(Tensor::zeros(params.get(id).shape()));
        }
        Adam {
            config,
            v: m.clone(),
            m,
            steps: 0,
            skipped: 0,
        }
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; missing
    /// gradients count as zero. Returns false and leaves everything
    /// untouched when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<bool> {
        if grads.len() != params.len() {
            return Err(Error::invalid(
                "adam step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for id in params.trainable_ids() {
            if let Some(gr) = &grads[id.index()] {
                if gr.shape() != params.get(id).shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam step",
                        lhs: gr.shape(),
                        rhs: params.get(id).shape(),
                    });
                }
                if !gr.all_finite() {
                    self.skipped += 1;
                    log::warn!("non-finite gradient for {}; step skipped", params.entry(id).name);
                    return Ok(false);
                }
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (self.m[i].as_mut().expect("trainable"), self.v[i].as_mut().expect("trainable"));
            let p = params.get_mut(id).data_mut();
            let gr = grads[i].as_ref().map(|g| g.data());
            for j in 0..p.len() {
                let pj = p[j].to_f64_lossy();
                let gj = gr.map_or(0.0, |g| g[j].to_f64_lossy()) + c.weight_decay * pj;
                let mj = c.beta1 * m.data()[j].to_f64_lossy() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v.data()[j].to_f64_lossy() + (1.0 - c.beta2) * gj * gj;
                m.data_mut()[j] = T::from_f64_lossy(mj);
                v.data_mut()[j] = T::from_f64_lossy(vj);
                let upd = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p[j] = T::from_f64_lossy(pj - upd);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Iterations between learning-rate halvings.
    pub lr_period: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            weight_decay: 1e-6,
            lr_period: 2000,
            batch_size: 8,
            max_iters: 10_000,
            seed: 0,
            loss_mode: LossMode::Mean,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("train config", "lr0 and weight_decay must be non-negative"));
        }
        if self.lr_period == 0 || self.batch_size == 0 || self.max_iters == 0 {
            return Err(Error::invalid(
                "train config",
                "lr_period, batch_size and max_iters must be positive",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr0 * 0.5f64.powi((iter / self.lr_period) as i32)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("lr0".into(), format!("{:?}", self.lr0)),
            ("weight_decay".into(), format!("{:?}", self.weight_decay)),
            ("lr_period".into(), self.lr_period.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_iters".into(), self.max_iters.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("loss_mode".into(), self.loss_mode.name().into()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<LossRecord>,
    pub val: Option<MetricReport>,
    pub skipped_steps: u64,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iter,loss,lr\n");
    for r in records {
        let _ = writeln!(s, "{},{:?},{:?}", r.iter, r.loss, r.lr);
    }
    s
}

/// Hash of the settings that determine a run's results.
pub fn config_hash(net: &NetConfig, cfg: &TrainConfig) -> u64 {
    let text: String = net
        .to_pairs()
        .into_iter()
        .chain(cfg.to_pairs())
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    fnv1a(text.as_bytes())
}

fn pairs_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Cached per-sample tensors so batches are assembled by copying.
struct Prepared<T> {
    image: Tensor<T>,
    sparse: Tensor<T>,
    gt: Tensor<T>,
    mask: Vec<bool>,
}

fn prepare<T: Real>(s: &SparseDepthSample) -> Prepared<T> {
    Prepared {
        image: s.image.to_tensor(),
        sparse: s.sparse.to_tensor(),
        gt: s.gt.to_tensor(),
        mask: s.gt.valid.clone(),
    }
}

fn assemble<T: Real>(items: &[&Prepared<T>]) -> Result<Batch<T>> {
    let stack = |f: fn(&Prepared<T>) -> &Tensor<T>| Tensor::stack(&items.iter().map(|p| f(p)).collect::<Vec<_>>());
    Ok(Batch {
        image: stack(|p| &p.image)?,
        sparse: stack(|p| &p.sparse)?,
        gt: stack(|p| &p.gt)?,
        mask: items.iter().flat_map(|p| p.mask.iter().copied()).collect(),
    })
}

/// Sample indices of iteration `iter`: consecutive positions of the
/// concatenated per-epoch shuffles.
pub fn batch_indices(len: usize, batch: usize, seed: u64, iter: usize) -> Vec<usize> {
    let start = iter * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / len;
    let mut order = epoch_order(len, seed, epoch as u64);
    for pos in start..start + batch {
        if pos / len != epoch {
            epoch = pos / len;
            order = epoch_order(len, seed, epoch as u64);
        }
        out.push(order[pos % len]);
    }
    out
}

/// Evaluation-mode metrics, one image at a time, averaged per image.
pub fn evaluate_model<T: Real>(model: &Model<T>, data: &Dataset) -> Result<MetricReport> {
    let reports = data
        .samples
        .iter()
        .map(|s| {
            let p = prepare::<T>(s);
            let pred = model.predict(&p.image, &p.sparse)?;
            evaluate_batch(&pred, &p.gt, &p.mask, EvalOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
}

/// Trains `model` in place. With `run_dir`, writes the run directory
/// described in the module docs; `header` lines are prepended to
/// `config.txt`. A non-finite loss aborts with the parameters of the last
/// finite step and the checkpoints written so far left in place.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    header: &[(String, String)],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    let prepared: Vec<Prepared<T>> = train_set.samples.iter().map(prepare).collect();
    if let Some(dir) = run_dir {
        let mut text = pairs_text(header);
        text += &pairs_text(&model.config().to_pairs());
        text += &pairs_text(&cfg.to_pairs());
        let _ = writeln!(text, "config_hash={:016x}", config_hash(model.config(), cfg));
        write_bytes(&dir.join("config.txt"), text.as_bytes())?;
    }
    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::with_capacity(cfg.max_iters);
    let mut last_checkpoint = None;
    let save = |model: &Model<T>, iter: usize| -> Result<Option<PathBuf>> {
        match run_dir {
            Some(dir) => {
                let path = dir.join("checkpoints").join(format!("iter_{iter}.gdc1"));
                model.to_checkpoint().save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };
    let flush = |losses: &[LossRecord]| -> Result<()> {
        match run_dir {
            Some(dir) => write_bytes(&dir.join("loss.csv"), loss_csv(losses).as_bytes()),
            None => Ok(()),
        }
    };
    for iter in 0..cfg.max_iters {
        let idx = batch_indices(prepared.len(), cfg.batch_size, cfg.seed, iter);
        let batch = assemble(&idx.iter().map(|&i| &prepared[i]).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let image = g.constant(batch.image);
        let sparse = g.constant(batch.sparse);
        let out = model.forward(&mut g, image, sparse, true)?;
        let loss = masked_mse_loss(&mut g, out.depth, &batch.gt, &batch.mask, cfg.loss_mode)?;
        let value = g.scalar(loss).to_f64_lossy();
        let lr = cfg.lr_at(iter);
        if !value.is_finite() {
            flush(&losses)?;
            let kept = last_checkpoint
                .as_ref()
                .map_or("none".to_string(), |p: &PathBuf| p.display().to_string());
            return Err(Error::NonFinite(format!(
                "loss {value} at iteration {iter}; last good checkpoint: {kept}"
            )));
        }
        losses.push(LossRecord { iter, loss: value, lr });
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = out.params.iter().map(|&v| g.grad(v).cloned()).collect();
        adam.step(model.params_mut(), &grads, lr)?;
        model.update_running_stats(&out.bn_stats);
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.max_iters {
            last_checkpoint = save(model, iter + 1)?;
            flush(&losses)?;
        }
        if (iter + 1) % 500 == 0 {
            log::info!("iter {} loss {value:.5} lr {lr:e}", iter + 1);
        }
    }
    last_checkpoint = save(model, cfg.max_iters)?.or(last_checkpoint);
    flush(&losses)?;
    let val = match val_set {
        Some(v) if !v.is_empty() => Some(evaluate_model(model, v)?),
        _ => None,
    };
    if let (Some(dir), Some(r)) = (run_dir, &val) {
        write_bytes(&dir.join("metrics_val.txt"), r.to_kv().as_bytes())?;
        write_bytes(&dir.join("metrics_val.json"), r.to_json().as_bytes())?;
    }
    Ok(TrainOutcome {
        losses,
        val,
        skipped_steps: adam.skipped,
        last_checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub scheme: FusionScheme,
    /// One validation report per seed, in seed order.
    pub per_seed: Vec<MetricReport>,
    pub mean: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Sorted by mean RMSE, ascending; ties keep input order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, scheme: FusionScheme) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }

    /// Appends the seeds of `other`, which must cover the same schemes.
    pub fn merge(&mut self, other: AblationTable) -> Result<()> {
        for row in other.rows {
            let mine = self
                .rows
                .iter_mut()
                .find(|r| r.scheme == row.scheme)
                .ok_or_else(|| Error::invalid("ablation merge", format!("scheme {} missing", row.scheme)))?;
            mine.per_seed.extend(row.per_seed);
            mine.mean = MetricReport::mean(&mine.per_seed)?;
        }
        if self.rows.iter().any(|r| r.per_seed.len() != self.seeds.len() + other.seeds.len()) {
            return Err(Error::invalid("ablation merge", "tables cover different schemes"));
        }
        self.seeds.extend(other.seeds);
        self.rows.sort_by(|a, b| a.mean.rmse_mm.total_cmp(&b.mean.rmse_mm));
        Ok(())
    }

    /// Whether `winner` has strictly lower mean RMSE than every rival.
    pub fn mean_beats(&self, winner: FusionScheme, rivals: &[FusionScheme]) -> Option<bool> {
        let w = self.row(winner)?.mean.rmse_mm;
        rivals.iter().map(|&r| self.row(r).map(|row| w < row.mean.rmse_mm)).try_fold(true, |acc, x| x.map(|b| acc && b))
    }

    /// Seeds on which `winner` fails to beat some rival.
    pub fn seed_violations(&self, winner: FusionScheme, rivals: &[FusionScheme]) -> Vec<u64> {
        let Some(w) = self.row(winner) else { return self.seeds.clone() };
        self.seeds
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                rivals.iter().any(|&r| {
                    self.row(r)
                        .is_none_or(|row| w.per_seed[i].rmse_mm >= row.per_seed[i].rmse_mm)
                })
            })
            .map(|(_, &s)| s)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<12} {:>10} {:>10} {:>12} {:>12}   seeds {:?}\n",
            "scheme", "RMSE[mm]", "MAE[mm]", "iRMSE[1/km]", "iMAE[1/km]", self.seeds
        );
        for r in &self.rows {
            let m = &r.mean;
            let _ = writeln!(
                s,
                "{:<12} {:>10.2} {:>10.2} {:>12.3} {:>12.3}",
                r.scheme.name(),
                m.rmse_mm,
                m.mae_mm,
                m.irmse_per_km,
                m.imae_per_km
            );
        }
        s
    }

    /// One line per scheme and seed plus a `mean` line per scheme.
    pub fn csv(&self) -> String {
        let mut s = String::from("scheme,seed,rmse_mm,mae_mm,irmse_per_km,imae_per_km\n");
        for r in &self.rows {
            let seeds = self.seeds.iter().map(|x| x.to_string());
            for (seed, m) in seeds.chain(["mean".to_string()]).zip(r.per_seed.iter().chain([&r.mean])) {
                let _ = writeln!(
                    s,
                    "{},{seed},{:?},{:?},{:?},{:?}",
                    r.scheme.name(),
                    m.rmse_mm,
                    m.mae_mm,
                    m.irmse_per_km,
                    m.imae_per_km
                );
            }
        }
        s
    }
}

/// Trains every scheme once per seed on the same data with the same budget.
/// `net` supplies everything but the fusion scheme. With `out`, each run
/// gets `out/{scheme}/seed_{seed}/`.
pub fn run_ablation<T: Real>(
    schemes: &[FusionScheme],
    net: &NetConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    out: Option<&Path>,
) -> Result<AblationTable> {
    if schemes.len() < 2 {
        return Err(Error::invalid("ablation", "needs at least two schemes"));
    }
    if seeds.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("ablation", "needs a seed and a validation set"));
    }
    let mut rows = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let net_cfg = NetConfig {
                fusion: scheme,
                ..net.clone()
            };
            let run_cfg = TrainConfig { seed, ..*cfg };
            let mut model = Model::<T>::build(net_cfg, seed)?;
            let dir = out.map(|o| o.join(scheme.name()).join(format!("seed_{seed}")));
            let header = [("scheme".to_string(), scheme.name().to_string())];
            let outcome = train(&mut model, train_set, Some(val_set), &run_cfg, dir.as_deref(), &header)?;
            let report = outcome.val.expect("validation set is nonempty");
            log::info!("{scheme} seed {seed}: rmse {:.2} mm", report.rmse_mm);
            per_seed.push(report);
        }
        let mean = MetricReport::mean(&per_seed)?;
        rows.push(AblationRow { scheme, per_seed, mean });
    }
    rows.sort_by(|a, b| a.mean.rmse_mm.total_cmp(&b.mean.rmse_mm));
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_on_period() {
        let cfg = TrainConfig {
            lr0: 1e-3,
            lr_period: 2000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(1999), 1e-3);
        assert_eq!(cfg.lr_at(2000), 5e-4);
        assert_eq!(cfg.lr_at(4000), 2.5e-4);
    }

    #[test]
    fn batches_walk_epochs() {
        let mut seen: Vec<usize> = (0..5).flat_map(|i| batch_indices(10, 2, 3, i)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(1, 3, 0, 7), vec![0, 0, 0]);
    }
}
