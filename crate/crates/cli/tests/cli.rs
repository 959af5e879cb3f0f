use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth_small(out: &Path) {
    let o = gdc(&[
        "synth", "--seed", "7", "--count", "4", "--val-count", "2", "--height", "16", "--width", "32",
        "--points-min", "30", "--points-max", "50", "--out", s(out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train_small(data: &Path, out: &Path, fusion: &str) -> Output {
    gdc(&[
        "train", "--data", s(data), "--channels", "4,8", "--fusion", fusion, "--iters", "6", "--batch-size", "2",
        "--checkpoint-every", "3", "--out", s(out),
    ])
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(&tmp.path().join("a"));
    synth_small(&tmp.path().join("b"));
    let a = tree(&tmp.path().join("a"));
    assert!(a.keys().any(|k| k.ends_with("train.tsv")));
    assert_eq!(a, tree(&tmp.path().join("b")));
}

#[test]
fn every_run_prints_the_header() {
    let o = gdc(&["cost", "--M", "8", "--N", "8", "--H", "4", "--B", "4"]);
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.starts_with("# gdc ") && first.contains("command=cost") && first.contains("config_hash="));
}

#[test]
fn cost_reports_the_worked_example() {
    let o = gdc(&["cost", "--M", "128", "--N", "128", "--K", "3", "--H", "64", "--B", "304"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("10.7 GB") && out.contains("0.08 GB"), "{out}");
    assert!(out.contains("11475615744") && out.contains("89718784"), "{out}");
}

#[test]
fn cost_measure_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("cost.csv");
    for _ in 0..2 {
        let o = gdc(&["cost", "--M", "8", "--N", "8", "--H", "16", "--B", "16", "--measure", "--csv", s(&csv)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains("naive kernel buffers 589824 bytes"), "{out}");
        assert!(out.contains("factorized kernel buffers 73984 bytes"), "{out}");
    }
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn selftest_passes() {
    let o = gdc(&["selftest", "--trials", "3", "--configs", "20"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().skip(1).all(|l| l.starts_with("pass ")), "{out}");
    assert!(out.contains("gradient masked_mse_loss"));
}

#[test]
fn usage_errors_exit_2() {
    let o = gdc(&["cost", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gdc(&["cost", "--M", "0", "--N", "8", "--H", "4", "--B", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: "), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn file_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.gdc1");
    let o = gdc(&["eval", "--checkpoint", s(&missing), "--manifest", s(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[io]: "));
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"not a png").unwrap();
    let data = tmp.path().join("d");
    synth_small(&data);
    let run = tmp.path().join("run");
    assert!(train_small(&data, &run, "add").status.success());
    let ck = run.join("checkpoints/iter_6.gdc1");
    let o = gdc(&["complete", "--checkpoint", s(&ck), "--image", s(&bad), "--sparse", s(&bad), "--out", s(&tmp.path().join("o.png"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn help_lists_flags() {
    let o = gdc(&["--help"]);
    let out = stdout(&o);
    for c in ["synth", "train", "ablate", "eval", "complete", "cost", "viz-kernels", "selftest", "Exit codes"] {
        assert!(out.contains(c), "{c} missing from help");
    }
    let out = stdout(&gdc(&["train", "--help"]));
    for f in ["--fusion", "--channels", "--lr-period", "--loss", "--precision", "--checkpoint-every"] {
        assert!(out.contains(f), "{f} missing from train help");
    }
}

#[test]
fn train_eval_complete_and_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth_small(&data);
    let run = tmp.path().join("run");
    let o = train_small(&data, &run, "de_guided");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "loss.csv", "metrics_val.txt", "metrics_val.json", "checkpoints/iter_3.gdc1"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("checkpoints/iter_6.gdc1");
    let eval_dir = tmp.path().join("eval");
    let o = gdc(&["eval", "--checkpoint", s(&ck), "--manifest", s(&data.join("val.tsv")), "--out", s(&eval_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rmse_mm="));
    // Evaluating the trained checkpoint on the validation split reproduces
    // the metrics written at the end of training.
    let trained = fs::read_to_string(run.join("metrics_val.txt")).unwrap();
    let evaluated = fs::read_to_string(eval_dir.join("metrics.txt")).unwrap();
    let body = |t: &str| t.lines().filter(|l| !l.starts_with('#')).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(body(&trained), body(&evaluated));

    let image = data.join("val/000000_image.png");
    let sparse = data.join("val/000000_sparse.png");
    let out = tmp.path().join("dense.png");
    let color = tmp.path().join("dense_color.png");
    let o = gdc(&["complete", "--checkpoint", s(&ck), "--image", s(&image), "--sparse", s(&sparse), "--out", s(&out), "--color", s(&color)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.exists() && color.exists());

    let viz = tmp.path().join("kernels.png");
    let o = gdc(&["viz-kernels", "--checkpoint", s(&ck), "--image", s(&image), "--sparse", s(&sparse), "--out", s(&viz)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(viz.exists());
}

#[test]
fn viz_rejects_non_guided_fusion() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth_small(&data);
    let run = tmp.path().join("run");
    assert!(train_small(&data, &run, "concat").status.success());
    let image = data.join("val/000000_image.png");
    let sparse = data.join("val/000000_sparse.png");
    let o = gdc(&[
        "viz-kernels", "--checkpoint", s(&run.join("checkpoints/iter_6.gdc1")), "--image", s(&image), "--sparse",
        s(&sparse), "--out", s(&tmp.path().join("k.png")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_table_and_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth_small(&data);
    let out = tmp.path().join("ab");
    let o = gdc(&[
        "ablate", "--data", s(&data), "--channels", "4,8", "--iters", "2", "--batch-size", "2", "--seeds", "1",
        "--rerun-seeds", "1", "--schemes", "de_guided,add", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
    assert!(verdict.contains("winner=de_guided") && verdict.contains("rivals=add"));
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 1 + 2 * 2);
    assert!(out.join("add/seed_0/metrics_val.txt").exists());
}
