//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. Criterion 6 audits the stored ablation artifacts under
//! `results/ablation`; regenerate them with `gdc synth` and `gdc ablate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gdc_core::cost;
use gdc_core::data::dataset::{Dataset, Split, SynthConfig};
use gdc_core::data::sampling::{sample_by_density, sample_fixed_count};
use gdc_core::guided::ChannelwiseKernels;
use gdc_core::metrics::{evaluate, EvalOptions, MetricReport};
use gdc_core::network::{verify_decoder_to_encoder, FusionScheme, Model, NetConfig};
use gdc_core::selftest::{self, GRADIENT_OPS};
use gdc_core::tensor::{Graph, Tensor};
use gdc_core::train::{evaluate_model, train, TrainConfig};
use gdc_core::viz::{kernels_to_field, prewitt_vector, PREWITT_X};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_factorization_identity() -> Verdict {
    let start = Instant::now();
    let g = selftest::factorization_identity::<f64>(100, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(g.cases >= 100, format!("only {} configurations", g.cases))?;
    ensure(g.tolerance <= 1e-10, format!("tolerance {:e} looser than 1e-10", g.tolerance))?;
    ensure(g.passed(), format!("worst relative error {:e} {}", g.worst, g.detail))?;
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} configs, worst {:.2e}, {secs:.2} s", g.cases, g.worst))
}

fn c2_gradient_suite() -> Verdict {
    let groups = selftest::gradient_suite(20, 0).map_err(|e| e.to_string())?;
    ensure(groups.len() == GRADIENT_OPS.len(), "operation count")?;
    let mut worst = 0.0f64;
    for (g, op) in groups.iter().zip(GRADIENT_OPS) {
        ensure(g.name.ends_with(op) && g.cases == 20, format!("group {} has {} trials", g.name, g.cases))?;
        ensure(g.tolerance <= 1e-4 && g.passed(), format!("{}: worst {:e}", g.name, g.worst))?;
        worst = worst.max(g.worst);
    }
    Ok(format!("{} ops x 20 trials, worst relative error {worst:.2e}", groups.len()))
}

fn c3_cost_example() -> Verdict {
    let r = cost::analyze(128, 128, 3, 64, 304, 4).map_err(|e| e.to_string())?;
    ensure(r.naive_bytes == 11_475_615_744, format!("naive {}", r.naive_bytes))?;
    ensure(r.fact_bytes == 89_718_784, format!("factorized {}", r.fact_bytes))?;
    let (naive, fact) = (cost::render_gib(r.naive_bytes), cost::render_gib(r.fact_bytes));
    ensure(naive == "10.7 GB" && fact == "0.08 GB", format!("rendered {naive} / {fact}"))?;
    let ratio = r.naive_over_fact();
    ensure((127.0..=129.0).contains(&ratio), format!("ratio {ratio}"))?;
    Ok(format!("{naive} vs {fact}, {ratio:.2}x"))
}

fn c4_measured_allocation() -> Verdict {
    let m = cost::measure(8, 8, 3, 16, 16, 0).map_err(|e| e.to_string())?;
    ensure(
        m.naive_alloc_bytes == Some(m.report.naive_bytes),
        format!("naive {:?} vs {}", m.naive_alloc_bytes, m.report.naive_bytes),
    )?;
    ensure(
        m.fact_alloc_bytes == m.report.fact_bytes,
        format!("factorized {} vs {}", m.fact_alloc_bytes, m.report.fact_bytes),
    )?;
    Ok(format!("naive {} B, factorized {} B", m.report.naive_bytes, m.fact_alloc_bytes))
}

fn metric_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..90.0, n),
            prop::collection::vec(0.5f64..80.0, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

fn c5_metrics() -> Verdict {
    let opts = EvalOptions::default();
    let ev = |p: &[f64], g: &[f64]| evaluate(p, g, &vec![true; p.len()], opts).map_err(|e| e.to_string());
    let id = ev(&[1.0, 2.5, 7.0, 40.0], &[1.0, 2.5, 7.0, 40.0])?;
    ensure(
        [id.rmse_mm, id.mae_mm, id.irmse_per_km, id.imae_per_km, id.rel] == [0.0; 5]
            && [id.delta_1, id.delta_2, id.delta_3] == [100.0; 3],
        format!("identity {id:?}"),
    )?;
    let two = ev(&[1.0, 4.0], &[2.0, 2.0])?;
    ensure(
        two.rel == 0.75 && two.delta_1 == 0.0 && two.rmse_m == 2.5f64.sqrt(),
        format!("two-pixel {two:?}"),
    )?;
    let off = ev(&[1.1; 9], &[1.0; 9])?;
    ensure(
        (off.rmse_mm - 100.0).abs() < 1e-9 && (off.mae_mm - 100.0).abs() < 1e-9,
        format!("offset {off:?}"),
    )?;
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&metric_instance(), |(pred, gt, mut mask, noise)| {
            mask[0] = true;
            let a = evaluate(&pred, &gt, &mask, opts).unwrap();
            prop_assert!(0.0 <= a.delta_1 && a.delta_1 <= a.delta_2 && a.delta_2 <= a.delta_3 && a.delta_3 <= 100.0);
            let moved: Vec<f64> =
                pred.iter().zip(&mask).zip(&noise).map(|((&p, &m), &z)| if m { p } else { p + z }).collect();
            prop_assert_eq!(a, evaluate(&moved, &gt, &mask, opts).unwrap());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("identity, two-pixel, offset exact; 1000 property cases".into())
}

fn results_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results/ablation")
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn kv(text: &str) -> BTreeMap<&str, &str> {
    text.lines().filter_map(|l| l.split_once('=')).collect()
}

fn c6_ablation_ordering() -> Verdict {
    let dir = results_dir();
    let data = read(&dir.join("dataset.txt"))?;
    let d = kv(&data);
    ensure(
        d.get("train_count") == Some(&"512")
            && d.get("val_count") == Some(&"64")
            && d.get("height") == Some(&"64")
            && d.get("width") == Some(&"128"),
        format!("dataset {d:?}"),
    )?;
    let csv = read(&dir.join("ablation.csv"))?;
    let mut per: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let Ok(seed) = f[1].parse::<u64>() else { continue };
        let rmse: f64 = f[2].parse().map_err(|_| format!("bad row {line}"))?;
        let run = dir.join(f[0]).join(format!("seed_{seed}"));
        let cfg = read(&run.join("config.txt"))?;
        let c = kv(&cfg);
        ensure(
            c.get("max_iters") == Some(&"10000") && c.get("fusion") == Some(&f[0]) && c.get("seed") == Some(&f[1]),
            format!("{}: budget or identity mismatch", run.display()),
        )?;
        let report = MetricReport::from_kv(&read(&run.join("metrics_val.txt"))?).map_err(|e| e.to_string())?;
        ensure(report.rmse_mm == rmse, format!("{}: csv {rmse} vs run {}", run.display(), report.rmse_mm))?;
        per.entry(f[0].to_string()).or_default().insert(seed, rmse);
    }
    let names = ["de_guided", "concat", "add"];
    let seeds: Vec<u64> = per.get("de_guided").map(|m| m.keys().copied().collect()).unwrap_or_default();
    for n in names {
        let s: Vec<u64> = per.get(n).map(|m| m.keys().copied().collect()).unwrap_or_default();
        ensure(s == seeds && s.len() >= 3, format!("{n} seeds {s:?} vs {seeds:?}"))?;
    }
    let first3 = &seeds[..3];
    let violated = first3
        .iter()
        .any(|s| names[1..].iter().any(|r| per[names[0]][s] >= per[*r][s]));
    let used: &[u64] = if violated {
        ensure(seeds.len() >= 5, "single-seed violation without the 5-seed rerun")?;
        &seeds[..5]
    } else {
        first3
    };
    let mean = |n: &str| used.iter().map(|s| per[n][s]).sum::<f64>() / used.len() as f64;
    let (de, cat, add) = (mean("de_guided"), mean("concat"), mean("add"));
    let detail = format!(
        "mean val RMSE over {} seeds: de_guided {de:.1} mm, concat {cat:.1} mm, add {add:.1} mm",
        used.len()
    );
    if de < cat && de < add {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c7_overfit() -> Verdict {
    let cfg = SynthConfig {
        train_count: 1,
        ..SynthConfig::default()
    };
    let one = Dataset::synthetic(&cfg, Split::Train).map_err(|e| e.to_string())?;
    let (h, w) = one.dims().ok_or("empty dataset")?;
    let (lo, hi) = one.samples[0].gt.min_max_valid().ok_or("no valid ground truth")?;
    let range = f64::from(hi - lo);
    let net = NetConfig {
        channels: vec![8, 16, 32],
        input_height: h,
        input_width: w,
        ..NetConfig::default()
    };
    let mut model = Model::<f32>::build(net, 0).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        batch_size: 1,
        max_iters: 500,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    train(&mut model, &one, None, &tc, None, &[]).map_err(|e| e.to_string())?;
    let r = evaluate_model(&model, &one).map_err(|e| e.to_string())?;
    let detail = format!("RMSE {:.3} m vs 5% of range {:.2} m = {:.3} m", r.rmse_m, range, 0.05 * range);
    if r.rmse_m < 0.05 * range {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_prewitt() -> Verdict {
    let px = PREWITT_X.concat();
    let v = prewitt_vector(&px).map_err(|e| e.to_string())?;
    ensure(v == (6.0, 0.0), format!("Prewitt_x gives {v:?}"))?;
    let v = prewitt_vector(&[1.0; 9]).map_err(|e| e.to_string())?;
    ensure(v == (0.0, 0.0), format!("ones give {v:?}"))?;
    let field = |k: &[f64]| {
        let kernels = ChannelwiseKernels::<f64>::from_fn(1, 1, 3, 2, 2, |_, _, i, y, x| k[(i * 2 + y) * 2 + x]).unwrap();
        kernels_to_field(&kernels, 0, 0).unwrap()
    };
    let mut runner = TestRunner::new(Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    });
    let pair = (
        prop::collection::vec(-2.0f64..2.0, 36),
        prop::collection::vec(-2.0f64..2.0, 36),
        -3.0f64..3.0,
        -3.0f64..3.0,
    );
    runner
        .run(&pair, |(w1, w2, a, b)| {
            let comb: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let (f1, f2, fc) = (field(&w1), field(&w2), field(&comb));
            for i in 0..4 {
                prop_assert!((fc.vx[i] - (a * f1.vx[i] + b * f2.vx[i])).abs() <= 1e-6);
                prop_assert!((fc.vy[i] - (a * f1.vy[i] + b * f2.vy[i])).abs() <= 1e-6);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("(6,0), (0,0), linearity over 100 pairs".into())
}

fn gdc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gdc"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("gdc {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()),
    )
}

fn c9_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();
    let data = p("data");
    gdc(&[
        "synth", "--seed", "5", "--count", "4", "--val-count", "2", "--height", "16", "--width", "32",
        "--points-min", "30", "--points-max", "50", "--out", &data,
    ])?;
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = p(run);
        gdc(&[
            "train", "--data", &data, "--channels", "4,8", "--iters", "12", "--batch-size", "2", "--lr-period", "5",
            "--seed", "3", "--out", &out,
        ])?;
        csvs.push(fs::read(tmp.path().join(run).join("loss.csv")).map_err(|e| e.to_string())?);
    }
    ensure(csvs[0] == csvs[1], "loss.csv differs between identical runs")?;
    ensure(csvs[0].iter().filter(|&&b| b == b'\n').count() == 13, "loss.csv row count")?;
    let cfg = SynthConfig::default();
    let (_, sample) = cfg.sample(Split::Train, 0).map_err(|e| e.to_string())?;
    let same = sample_by_density(&sample.sparse, 1.0, 17).map_err(|e| e.to_string())?;
    ensure(same == sample.sparse, "density 1.0 changed the input")?;
    let fixed = sample_fixed_count(&sample.gt, 200, 17).map_err(|e| e.to_string())?;
    ensure(fixed.valid_count() == 200, format!("{} points", fixed.valid_count()))?;
    Ok("loss.csv bit-identical; density 1.0 identity; 200 of 200 points".into())
}

fn c10_variants() -> Verdict {
    let img = Tensor::<f32>::from_fn([1, 3, 64, 64], |[_, c, y, x]| ((c * 29 + y * 37 + x * 11) % 101) as f32 / 100.0);
    let sparse = Tensor::<f32>::from_fn([1, 1, 64, 64], |[_, _, y, x]| {
        if (y * 64 + x) % 13 == 0 {
            1.0 + ((y + x) % 17) as f32
        } else {
            0.0
        }
    });
    for scheme in FusionScheme::ALL {
        let cfg = NetConfig {
            channels: vec![8, 16, 32],
            fusion: scheme,
            input_height: 64,
            input_width: 64,
            ..NetConfig::default()
        };
        let model = Model::<f32>::build(cfg, 1).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let i = g.constant(img.clone());
        let s = g.constant(sparse.clone());
        let out = model.forward(&mut g, i, s, true).map_err(|e| format!("{scheme}: {e}"))?;
        ensure(g.value(out.depth).all_finite(), format!("{scheme}: non-finite output"))?;
        let loss = g.sum(out.depth);
        g.backward(loss).map_err(|e| format!("{scheme}: {e}"))?;
        for id in model.params().trainable_ids() {
            let finite = g.grad(out.params[id.index()]).is_some_and(|t| t.all_finite());
            ensure(finite, format!("{scheme}: {} gradient", model.params().entry(id).name))?;
        }
        let topo = verify_decoder_to_encoder(&g, &out.trace, 3);
        ensure(
            topo.is_ok() == (scheme == FusionScheme::DeGuided),
            format!("{scheme}: topology check {topo:?}"),
        )?;
    }
    Ok(format!("{} schemes forward and backward; decoder-to-encoder topology holds only for de_guided", FusionScheme::ALL.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("factorization identity", c1_factorization_identity),
        ("gradient suite", c2_gradient_suite),
        ("kernel memory example", c3_cost_example),
        ("measured allocation", c4_measured_allocation),
        ("metrics", c5_metrics),
        ("ablation ordering", c6_ablation_ordering),
        ("overfit sanity", c7_overfit),
        ("prewitt reduction", c8_prewitt),
        ("determinism", c9_determinism),
        ("fusion variants", c10_variants),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {status} {name}: {detail} [{:.1} s]",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
