//! Depth error metrics over a validity mask.
//!
//! Inverse-depth errors are in 1/km. The threshold accuracies `delta_i` are
//! percentages of pixels with `max(d/g, g/d) < 1.25^i`; a ratio exactly at
//! the threshold does not count.
//!
//! Serialized forms:
//!
//! ```text
//! rmse_mm=...            key=value, one metric per line, in field order
//! {
//!   "metrics": { "rmse_mm": ..., ..., "delta_3": ... },
//!   "counts": { "n_pixels": ..., "clamped": ... }
//! }
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthUnit {
    Meters,
    Millimeters,
}

impl DepthUnit {
    fn per_meter(self) -> f64 {
        match self {
            DepthUnit::Meters => 1.0,
            DepthUnit::Millimeters => 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub unit: DepthUnit,
    /// Predictions below this many meters are raised to it for the
    /// inverse-depth and ratio terms.
    pub epsilon_m: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            unit: DepthUnit::Meters,
            epsilon_m: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub rmse_m: f64,
    pub rel: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
    pub n_pixels: usize,
    /// Masked pixels whose prediction was raised to the epsilon.
    pub clamped: usize,
}

const THRESHOLD: f64 = 1.25;

/// Metrics of one depth map. `mask` selects the pixels; ground truth must
/// be positive there.
pub fn evaluate(pred: &[f64], gt: &[f64], mask: &[bool], opts: EvalOptions) -> Result<MetricReport> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("lengths differ: pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len()),
        ));
    }
    let scale = opts.unit.per_meter();
    let eps = opts.epsilon_m * scale;
    let (mut se, mut ae, mut ise, mut iae, mut rel) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let (mut n, mut clamped) = (0usize, 0usize);
    for ((&d, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::invalid("evaluate", format!("ground truth {g} on a masked pixel")));
        }
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("prediction {d} on a masked pixel")));
        }
        n += 1;
        let e = d - g;
        se += e * e;
        ae += e.abs();
        rel += e.abs() / g;
        let dc = if d < eps {
            clamped += 1;
            eps
        } else {
            d
        };
        // 1/km: (1000 m/km) * (units per meter) / depth in units
        let k = 1000.0 * scale;
        let ie = k / dc - k / g;
        ise += ie * ie;
        iae += ie.abs();
        let ratio = (dc / g).max(g / dc);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < THRESHOLD.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("evaluate", "mask selects no pixel"));
    }
    let nf = n as f64;
    let rmse_native = (se / nf).sqrt();
    let mae_native = ae / nf;
    let (rmse_mm, mae_mm, rmse_m) = match opts.unit {
        DepthUnit::Meters => (1000.0 * rmse_native, 1000.0 * mae_native, rmse_native),
        DepthUnit::Millimeters => (rmse_native, mae_native, rmse_native / 1000.0),
    };
    let pct = |h: usize| 100.0 * h as f64 / nf;
    Ok(MetricReport {
        rmse_mm,
        mae_mm,
        irmse_per_km: (ise / nf).sqrt(),
        imae_per_km: iae / nf,
        rmse_m,
        rel: rel / nf,
        delta_1: pct(hits[0]),
        delta_2: pct(hits[1]),
        delta_3: pct(hits[2]),
        n_pixels: n,
        clamped,
    })
}

/// Per-image metrics of `[N, 1, H, W]` tensors in meters, averaged over
/// the batch. `mask` is flat over the whole batch.
pub fn evaluate_batch<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &[bool], opts: EvalOptions) -> Result<MetricReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(
            "evaluate",
            format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape()),
        ));
    }
    let per = gt.shape().item_len();
    if mask.len() != per * gt.shape().0[0] {
        return Err(Error::invalid("evaluate", "mask length differs from the batch"));
    }
    let reports = (0..gt.shape().0[0])
        .map(|n| {
            let p: Vec<f64> = pred.item(n).iter().map(|v| v.to_f64_lossy()).collect();
            let g: Vec<f64> = gt.item(n).iter().map(|v| v.to_f64_lossy()).collect();
            evaluate(&p, &g, &mask[n * per..(n + 1) * per], opts)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
}

impl MetricReport {
    pub const KEYS: [&'static str; 11] = [
        "rmse_mm",
        "mae_mm",
        "irmse_per_km",
        "imae_per_km",
        "rmse_m",
        "rel",
        "delta_1",
        "delta_2",
        "delta_3",
        "n_pixels",
        "clamped",
    ];

    fn reals(&self) -> [f64; 9] {
        [
            self.rmse_mm,
            self.mae_mm,
            self.irmse_per_km,
            self.imae_per_km,
            self.rmse_m,
            self.rel,
            self.delta_1,
            self.delta_2,
            self.delta_3,
        ]
    }

    fn from_reals(r: [f64; 9], n_pixels: usize, clamped: usize) -> Self {
        MetricReport {
            rmse_mm: r[0],
            mae_mm: r[1],
            irmse_per_km: r[2],
            imae_per_km: r[3],
            rmse_m: r[4],
            rel: r[5],
            delta_1: r[6],
            delta_2: r[7],
            delta_3: r[8],
            n_pixels,
            clamped,
        }
    }

    /// Unweighted mean over images; counts are summed.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyReduction("metric mean"));
        }
        let mut acc = [0.0; 9];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.reals()) {
                *a += v;
            }
        }
        let n = reports.len() as f64;
        Ok(Self::from_reals(
            acc.map(|a| a / n),
            reports.iter().map(|r| r.n_pixels).sum(),
            reports.iter().map(|r| r.clamped).sum(),
        ))
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.reals()) {
            let _ = writeln!(s, "{k}={v:?}");
        }
        let _ = writeln!(s, "n_pixels={}", self.n_pixels);
        let _ = writeln!(s, "clamped={}", self.clamped);
        s
    }

    /// Reads the output of [`to_kv`](Self::to_kv); unknown keys are ignored
    /// so the text may carry extra lines.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut reals = [f64::NAN; 9];
        let (mut n_pixels, mut clamped) = (None, None);
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::format("metric report", format!("{k}={v} is not a number"));
            match k {
                "n_pixels" => n_pixels = Some(v.parse().map_err(|_| bad())?),
                "clamped" => clamped = Some(v.parse().map_err(|_| bad())?),
                _ => {
                    if let Some(i) = Self::KEYS[..9].iter().position(|&key| key == k) {
                        reals[i] = v.parse().map_err(|_| bad())?;
                    }
                }
            }
        }
        if let Some(i) = reals.iter().position(|v| v.is_nan()) {
            return Err(Error::format("metric report", format!("missing {}", Self::KEYS[i])));
        }
        let missing = |k| Error::format("metric report", format!("missing {k}"));
        Ok(Self::from_reals(
            reals,
            n_pixels.ok_or_else(|| missing("n_pixels"))?,
            clamped.ok_or_else(|| missing("clamped"))?,
        ))
    }

    pub fn to_json(&self) -> String {
        let metrics: serde_json::Map<String, serde_json::Value> =
            Self::KEYS[..9].iter().zip(self.reals()).map(|(k, v)| (k.to_string(), v.into())).collect();
        let doc = serde_json::json!({
            "metrics": metrics,
            "counts": { "n_pixels": self.n_pixels, "clamped": self.clamped },
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("plain numbers serialize");
        text.push('\n');
        text
    }
}
