//! Acceptance suite. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.
//!
//! `DROPACT_EXTENDED=1` additionally runs the regression comparison at full
//! network width (tens of minutes on one core).

mod common;

use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use common::{four_image_fixture, random_case};
use dropact_core::activations::{drop_act_test, drop_act_train, sample_mask, ActivationKind};
use dropact_core::datasets::{load_idx_pair, parse_idx_images, parse_idx_labels, RegressionTarget, RegressionTask};
use dropact_core::penalty::{
    closed_form_loss, enumerated_expected_loss, exact_expected_loss, random_instance, OneHiddenNet, SampleSet,
};
use dropact_core::rng::generator;
use dropact_core::tensor::Tensor;
use dropact_core::trainer::{run_regression_experiment, RegressionExperiment};
use dropact_core::variance_shift::{analytic_shift_ratio, simulate_box, BoxConfig};
use dropact_core::Error;
use rand::seq::IndexedRandom;
use rand::Rng;

type Criterion = Box<dyn Fn() -> Verdict>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.2}s (limit {}s)", t.as_secs_f64(), limit.as_secs()))
}

fn strict_rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn dropact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dropact")).args(args).output().unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = generator(2024);
    let (mut worst, mut worst_exact, mut failures) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let k = rng.random_range(1..=12);
        let d_in = rng.random_range(1..=8);
        let d_out = rng.random_range(1..=8);
        let n = rng.random_range(1..=10);
        let p = *[0.3, 0.5, 0.8, 0.95, 1.0].choose(&mut rng).unwrap();
        let (net, data) = random_instance(k, d_in, d_out, n, &mut rng).unwrap();
        let enumerated = enumerated_expected_loss(&net, &data, p).unwrap();
        let err = strict_rel(enumerated, closed_form_loss(&net, &data, p).unwrap());
        if err > 1e-10 {
            failures += 1;
        }
        worst = worst.max(err);
        worst_exact = worst_exact.max(strict_rel(enumerated, exact_expected_loss(&net, &data, p).unwrap()));
    }
    let (fast, time) = within(start, Duration::from_secs(5));
    verdict(
        failures == 0 && fast,
        format!(
            "{failures}/200 instances exceed 1e-10; max rel err {worst:.3e} \
             (exact per-unit variance form: {worst_exact:.3e}); {time}"
        ),
    )
}

fn criterion_2() -> Verdict {
    let net = OneHiddenNet::new(Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    let data = SampleSet::new(Tensor::matrix(1, 1, vec![-1.0]).unwrap(), Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
    let closed = closed_form_loss(&net, &data, 0.5).unwrap();
    let enumerated = enumerated_expected_loss(&net, &data, 0.5).unwrap();
    verdict(
        closed == 0.5 && enumerated == 0.5,
        format!("closed form {closed:?}, enumeration {enumerated:?}"),
    )
}

fn criterion_3() -> Verdict {
    let r = analytic_shift_ratio(0.95).unwrap();
    verdict((r - 0.9377).abs() <= 1e-4, format!("ratio(0.95) = {r:.7}"))
}

fn criterion_4() -> Verdict {
    let curve: Vec<(f64, f64)> = (0..=1000)
        .map(|i| {
            let p = i as f64 / 1000.0;
            (p, analytic_shift_ratio(p).unwrap())
        })
        .collect();
    let (argmin, min) = curve.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let max = curve.iter().map(|c| c.1).fold(f64::MIN, f64::max);
    let contained = curve.iter().all(|&(_, r)| (0.8..=1.0).contains(&r));
    verdict(
        (0.80..=0.82).contains(&min) && contained,
        format!("min {min:.5} at p={argmin}, max {max:.5}"),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for p in [0.5, 0.8, 0.95] {
        let r = simulate_box(&BoxConfig::gaussian_weights(512, p, 100_000, 11, 12)).unwrap();
        let err = strict_rel(r.empirical_ratio, r.analytic_ratio);
        ok &= err <= 0.03;
        notes.push(format!("p={p} ratio err {:.2}%", 100.0 * err));
    }
    for p in [0.5, 0.95] {
        let r = simulate_box(&BoxConfig {
            weights: vec![1.0],
            p,
            sample_count: 1_000_000,
            seed: 13,
        })
        .unwrap();
        let train = (r.empirical_var_train - r.analytic_var_train).abs() / r.analytic_var_train;
        let test = (r.empirical_var_test - r.analytic_var_test).abs() / r.analytic_var_test;
        ok &= train <= 0.01 && test <= 0.01;
        notes.push(format!("w=[1] p={p} var err {:.2}%/{:.2}%", 100.0 * train, 100.0 * test));
    }
    let (fast, time) = within(start, Duration::from_secs(30));
    verdict(ok && fast, format!("{}; {time}", notes.join(", ")))
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let mut rng = generator(606);
    let p = 0.95;
    let trials = 100_000;
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Tensor::vector(x).unwrap();
        let mut sum = vec![0.0; x.len()];
        let mut passthrough = true;
        for _ in 0..trials {
            let mask = sample_mask(x.len(), p, &mut rng).unwrap();
            for ((s, o), v) in sum.iter_mut().zip(drop_act_train(&x, &mask).unwrap().data()).zip(x.data()) {
                *s += o;
                passthrough &= *v < 0.0 || o == v;
            }
        }
        // non-negative entries have zero variance: every draw must equal the input
        if !passthrough {
            worst_z = f64::INFINITY;
        }
        let expect = drop_act_test(&x, p).unwrap();
        for ((s, e), v) in sum.iter().zip(expect.data()).zip(x.data()) {
            if *v < 0.0 {
                let dev = (s / trials as f64 - e).abs();
                worst_z = worst_z.max(dev / (v.abs() * (p * (1.0 - p) / trials as f64).sqrt()));
            }
        }
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    verdict(worst_z <= 4.0 && fast, format!("max deviation {worst_z:.2} binomial SE; {time}"))
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        worst = worst.max(random_case(7_000 + seed).max_gradient_error(1e-5).unwrap());
    }
    let (fast, time) = within(start, Duration::from_secs(60));
    verdict(worst <= 1e-6 && fast, format!("100 models, max rel err {worst:.2e}; {time}"))
}

fn regression_comparison(widths: &[usize]) -> Verdict {
    let start = Instant::now();
    let (mut relu, mut drop) = (Vec::new(), Vec::new());
    let mut identical = true;
    for seed in 0..11 {
        let mut exp = RegressionExperiment::new(RegressionTask::new(RegressionTarget::XSinX, seed), seed);
        exp.widths = widths.to_vec();
        let r = run_regression_experiment(&exp, ActivationKind::Relu).unwrap();
        let d = run_regression_experiment(&exp, ActivationKind::drop_act(0.95)).unwrap();
        let one = run_regression_experiment(&exp, ActivationKind::drop_act(1.0)).unwrap();
        identical &= r.record.same_outcome(&one.record)
            && r.grid_mse.to_bits() == one.grid_mse.to_bits()
            && r.prediction.iter().zip(&one.prediction).all(|(a, b)| a.to_bits() == b.to_bits());
        relu.push(r.grid_mse);
        drop.push(d.grid_mse);
    }
    let (mr, md) = (median(relu), median(drop));
    verdict(
        md < mr && identical,
        format!(
            "widths {widths:?}: median grid MSE DropAct {md:.4} vs ReLU {mr:.4}; p=1 identical to ReLU: {identical}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9() -> Verdict {
    let out = dropact(&["monitor-bn"]);
    if out.status.code() != Some(0) {
        return verdict(false, String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8(out.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let ratio: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    verdict((0.9..=1.1).contains(&ratio), format!("final row {last}"))
}

fn criterion_10() -> Verdict {
    let start = Instant::now();
    let out = dropact(&["grid-search", "--format", "json"]);
    if out.status.code() != Some(0) {
        return verdict(false, String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let cfg = &v["meta"]["config"];
    let expected_p: Vec<f64> = (0..9).map(|i| (60 + 5 * i) as f64 / 100.0).collect();
    let ps: Vec<f64> = rows.iter().map(|r| r["p"].as_f64().unwrap()).collect();
    let shape = rows.len() == 9
        && ps.iter().zip(&expected_p).all(|(a, b)| (a - b).abs() < 1e-12)
        && cfg["val_fraction"] == 0.1;
    let stats = rows.iter().all(|r| {
        let (mean, lo, hi, half) = (
            r["mean_error"].as_f64().unwrap(),
            r["ci_low"].as_f64().unwrap(),
            r["ci_high"].as_f64().unwrap(),
            r["ci_halfwidth"].as_f64().unwrap(),
        );
        r["repeats"] == 20
            && r["degenerate_ci"] == false
            && half > 0.0
            && ((mean - half) - lo).abs() < 1e-12
            && ((mean + half) - hi).abs() < 1e-12
    });
    verdict(
        shape && stats,
        format!("{} rows, repeats 20, val fraction {}; {:.1}s", rows.len(), cfg["val_fraction"], start.elapsed().as_secs_f64()),
    )
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = four_image_fixture();
    let ip = dir.path().join("images.idx");
    let lp = dir.path().join("labels.idx");
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    let (ip, lp) = (ip.to_str().unwrap(), lp.to_str().unwrap());
    let runs: Vec<Vec<&str>> = vec![
        vec!["verify-property1", "--seed", "42"],
        vec!["verify-shift-ratio", "--seed", "7"],
        vec!["curve-shift-ratio"],
        vec!["simulate-box", "--seed", "7"],
        vec!["train-regression", "--widths", "20,16,8", "--epochs", "300", "--seed", "3", "--emit", "prediction"],
        vec!["grid-search", "--repeats", "3", "--epochs", "5", "--seed", "8"],
        vec!["train-classify", "--seed", "4"],
        vec!["train-classify", "--epochs", "3", "--train-images", ip, "--train-labels", lp, "--val-fraction", "0.25"],
        vec!["monitor-bn", "--seed", "2"],
    ];
    let mut differing = Vec::new();
    for (i, args) in runs.iter().enumerate() {
        for format in ["csv", "json"] {
            let files: Vec<Vec<u8>> = (0..2)
                .map(|run| {
                    let path = dir.path().join(format!("{i}_{run}.{format}"));
                    let out = dropact(&[&args[..], &["--format", format, "--out", path.to_str().unwrap()]].concat());
                    assert!(matches!(out.status.code(), Some(0 | 1)), "{args:?}");
                    std::fs::read(&path).unwrap()
                })
                .collect();
            if files[0].is_empty() || files[0] != files[1] {
                differing.push(format!("{} ({format})", args[0]));
            }
        }
    }
    verdict(
        differing.is_empty(),
        format!("{} invocations x 2 formats; differing: {differing:?}", runs.len()),
    )
}

fn criterion_12() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = four_image_fixture();
    let ip = dir.path().join("images.idx");
    let lp = dir.path().join("labels.idx");
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let data = load_idx_pair(&ip, &lp).unwrap();
    let expect: Vec<f64> = (0..24).map(|i| f64::from((i * 10) as u8) / 255.0).collect();
    let exact = data.images.shape() == [4, 2, 3] && data.images.data() == expect.as_slice() && data.labels == [0, 1, 2, 1];

    let mut bad_magic = images.clone();
    bad_magic[3] = 0x04;
    let truncated = &images[..images.len() - 1];
    let errors = matches!(parse_idx_images(&bad_magic, "m"), Err(Error::Format { .. }))
        && matches!(parse_idx_images(truncated, "t"), Err(Error::Length { .. }))
        && matches!(parse_idx_labels(&labels[..labels.len() - 1], "t"), Err(Error::Length { .. }));

    let mut statuses = Vec::new();
    for (name, bytes) in [("magic.idx", bad_magic.as_slice()), ("short.idx", truncated)] {
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        let out = dropact(&[
            "train-classify",
            "--epochs",
            "1",
            "--train-images",
            path.to_str().unwrap(),
            "--train-labels",
            lp.to_str().unwrap(),
        ]);
        statuses.push(out.status.code());
    }
    verdict(
        exact && errors && statuses.iter().all(|s| *s == Some(3)),
        format!("fixture exact: {exact}; typed errors: {errors}; exit statuses {statuses:?}"),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are meaningless here; honour only listing
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut criteria: Vec<(&str, Criterion)> = vec![
        ("1", Box::new(criterion_1)),
        ("2", Box::new(criterion_2)),
        ("3", Box::new(criterion_3)),
        ("4", Box::new(criterion_4)),
        ("5", Box::new(criterion_5)),
        ("6", Box::new(criterion_6)),
        ("7", Box::new(criterion_7)),
        ("8", Box::new(|| regression_comparison(&[100, 80, 20]))),
        ("9", Box::new(criterion_9)),
        ("10", Box::new(criterion_10)),
        ("11", Box::new(criterion_11)),
        ("12", Box::new(criterion_12)),
    ];
    if std::env::var_os("DROPACT_EXTENDED").is_some() {
        criteria.push(("8-full", Box::new(|| regression_comparison(&[1000, 800, 200]))));
    }
    let mut failed = 0;
    for (name, check) in &criteria {
        let v = check();
        failed += usize::from(!v.pass);
        println!("criterion {name}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
