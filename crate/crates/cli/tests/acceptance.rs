//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any gated criterion fails.
//!
//! The scaled-down ablation comparison takes tens of minutes; it only runs
//! when `CFPN_ABLATION=1` and is reported without gating.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cfpn::backbone::{self, LEVEL_CHANNELS, LEVEL_STRIDES};
use cfpn::cfa::{self, CfaVariant, FusionWeights};
use cfpn::data_io;
use cfpn::gradcheck::{finite_difference_check, GradCheckConfig};
use cfpn::metrics;
use cfpn::training::checkpoint::load_checkpoint;
use cfpn::training::{balanced_bce_value, BetaConvention};
use cfpn::{forward, predict, CfdConfig, Ctx, Mode, ModelConfig, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (u8, &'static str, bool, f64, Box<dyn Fn() -> Outcome + 'a>);

fn cfpn_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfpn"))
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = cfpn_bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "cfpn {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Gradient fidelity

fn gradient_fidelity(tmp: &Path) -> Outcome {
    let out_dir = tmp.join("gradcheck");
    let run = cfpn_bin()
        .args(["gradcheck", "--out", path_str(&out_dir)])
        .output()
        .map_err(|e| e.to_string())?;
    let report: serde_json::Value = serde_json::from_slice(
        &fs::read(out_dir.join("gradcheck.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let max_err = |key: &str| {
        report[key]["tensors"]
            .as_array()
            .expect("tensor list")
            .iter()
            .map(|t| t["max_rel_error"].as_f64().expect("number"))
            .fold(0.0, f64::max)
    };
    let (ops_err, model_err) = (max_err("ops"), max_err("model"));
    ensure(run.status.code() == Some(0), || {
        format!(
            "gradcheck exit {:?}, ops {ops_err:e}, model {model_err:e}",
            run.status.code()
        )
    })?;
    ensure(ops_err < 1e-4 && model_err < 1e-4, || {
        format!("ops {ops_err:e}, model {model_err:e}")
    })?;

    // every parameter tensor of the default model appears in the report
    let listed: Vec<&str> = report["model"]["tensors"]
        .as_array()
        .expect("tensor list")
        .iter()
        .map(|t| t["name"].as_str().expect("name"))
        .collect();
    let expected = ModelConfig::default().init_params(0);
    ensure(listed.len() == expected.params.len(), || {
        format!(
            "report lists {} of {} tensors",
            listed.len(),
            expected.params.len()
        )
    })?;
    ensure(
        expected.params.keys().all(|k| listed.contains(&k.as_str())),
        || "report misses a parameter tensor".into(),
    )?;

    // negative control: sigmoid with a broken backward rule (y instead of y(1-y))
    let mut p = ModelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[8], |_| rng.gen_range(-2.0..2.0));
    let r = Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0));
    p.params.insert("x".into(), x.clone());
    let loss = |p: &ModelParams| {
        let v: f64 = p.params["x"]
            .data()
            .iter()
            .zip(r.data())
            .map(|(x, r)| r / (1.0 + (-x).exp()))
            .sum();
        Ok((v, 0))
    };
    let y: Vec<f64> = x.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
    let rule = |f: &dyn Fn(f64) -> f64| {
        BTreeMap::from([(
            "x".to_string(),
            Tensor::from_fn(&[8], |i| r.data()[i] * f(y[i])),
        )])
    };
    let cfg = GradCheckConfig::default();
    let good = finite_difference_check(&mut p, &rule(&|y| y * (1.0 - y)), &cfg, loss)
        .map_err(|e| e.to_string())?;
    let bad =
        finite_difference_check(&mut p, &rule(&|y| y), &cfg, loss).map_err(|e| e.to_string())?;
    ensure(good.passed() && !bad.passed(), || {
        "negative control not detected".into()
    })?;

    Ok(format!(
        "ops max rel err {ops_err:.2e}, full model {model_err:.2e}, {} tensors listed, corrupted rule rejected (err {:.2e})",
        listed.len(),
        bad.max_rel_error()
    ))
}

// 2. Shape contract

fn shape_contract() -> Outcome {
    let config = ModelConfig::default();
    let params = config.init_params(0);
    let mut notes = Vec::new();
    for size in [96usize, 384] {
        let image = Tensor::from_fn(&[3, size, size], |i| (i % 13) as f64 / 13.0);
        let mut ctx = Ctx::new(&params, Mode::Eval);
        let out = forward(&mut ctx, &config, &image).map_err(|e| e.to_string())?;
        let t = &ctx.tape;
        ensure(t.shape(out.cfa.f) == [960, size / 4, size / 4], || {
            format!("{size}: F is {:?}", t.shape(out.cfa.f))
        })?;
        for n in 0..5 {
            let level = out
                .distributed
                .get(&n)
                .ok_or(format!("{size}: missing CFD level {n}"))?;
            let want = [
                LEVEL_CHANNELS[n],
                size / LEVEL_STRIDES[n],
                size / LEVEL_STRIDES[n],
            ];
            ensure(
                t.shape(level.features) == want && level.stride == LEVEL_STRIDES[n],
                || format!("{size}: CFD level {n} is {:?}", t.shape(level.features)),
            )?;
            let b = &out.pyramid.levels[n];
            ensure(t.shape(b.features) == want, || {
                format!("{size}: backbone level {n}")
            })?;
        }
        for (name, v) in [("S_g", out.s_global), ("S_l", out.s_local)] {
            ensure(t.shape(v) == [1, size, size], || {
                format!("{size}: {name} is {:?}", t.shape(v))
            })?;
        }
        notes.push(format!("{size}: F {:?}", t.shape(out.cfa.f)));
    }
    Ok(notes.join("; "))
}

// 3. Ablation reductions

fn ablation_reductions() -> Outcome {
    let config = ModelConfig {
        cfa_variant: CfaVariant::NoReweighting,
        ..ModelConfig::default()
    };
    let params = config.init_params(2);
    let image = Tensor::from_fn(&[3, 64, 64], |i| ((i * 17) % 101) as f64 / 101.0);
    let mut ctx = Ctx::new(&params, Mode::Eval);
    let x = ctx.tape.constant(image.clone());
    let pyramid = backbone::extract_features(&mut ctx, x).map_err(|e| e.to_string())?;
    let a =
        cfa::run_cfa(&mut ctx, &pyramid, CfaVariant::NoReweighting).map_err(|e| e.to_string())?;
    let psi = ctx.tape.constant(Tensor::ones(&[5]));
    let ones =
        cfa::reweight(&mut ctx.tape, &pyramid, FusionWeights { psi }).map_err(|e| e.to_string())?;
    let d = cfa::aggregate(&mut ctx.tape, &ones).map_err(|e| e.to_string())?;
    let diff = ctx
        .tape
        .value(a.f)
        .max_abs_diff(ctx.tape.value(d))
        .map_err(|e| e.to_string())?;
    ensure(diff <= 1e-12, || {
        format!("A vs D(psi=1) differ by {diff:e}")
    })?;

    let only0 = ModelConfig {
        cfd: Some(CfdConfig::new([0]).map_err(|e| e.to_string())?),
        ..ModelConfig::default()
    };
    let p0 = only0.init_params(2);
    let mut ctx = Ctx::new(&p0, Mode::Eval);
    let out = forward(&mut ctx, &only0, &image).map_err(|e| e.to_string())?;
    ensure(
        out.topdown.upsamples == 0 && out.topdown.merges == 0,
        || {
            format!(
                "CFD {{0}}: {} merges, {} upsamples",
                out.topdown.merges, out.topdown.upsamples
            )
        },
    )?;
    Ok(format!(
        "max |F_A - F_D(psi=1)| = {diff:e}; CFD {{0}} has 0 upsampling merges"
    ))
}

// 4. Metric oracles

struct BruteForce {
    precision: Vec<f64>,
    recall: Vec<f64>,
    max_f: f64,
    mae: f64,
}

fn brute_force_metrics(s: &[f64], y: &[f64], beta2: f64) -> BruteForce {
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    let (mut precision, mut recall, mut max_f) = (Vec::new(), Vec::new(), 0.0f64);
    for k in 0..256 {
        let t = k as f64 / 255.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&sv, &yv) in s.iter().zip(y) {
            if sv >= t {
                if yv == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let p = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if positives == 0 {
            1.0
        } else {
            tp as f64 / positives as f64
        };
        let f = if p + r == 0.0 {
            0.0
        } else {
            (1.0 + beta2) * p * r / (beta2 * p + r)
        };
        precision.push(p);
        recall.push(r);
        max_f = max_f.max(f);
    }
    let mae = s.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64;
    BruteForce {
        precision,
        recall,
        max_f,
        mae,
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..20 {
        let quantized = case % 2 == 0;
        let fg_rate = [0.0, 0.3, 0.5, 1.0][case % 4];
        let s = Tensor::from_fn(&[1, 8, 8], |_| {
            if quantized {
                rng.gen_range(0..=255) as f64 / 255.0
            } else {
                rng.gen::<f64>()
            }
        });
        let y = Tensor::from_fn(
            &[1, 8, 8],
            |_| if rng.gen_bool(fg_rate) { 1.0 } else { 0.0 },
        );
        let oracle = brute_force_metrics(s.data(), y.data(), 0.3);
        let curve = metrics::pr_curve(&s, &y).map_err(|e| e.to_string())?;
        ensure(
            curve.precision == oracle.precision && curve.recall == oracle.recall,
            || format!("case {case}: PR curve differs"),
        )?;
        let max_f = metrics::max_f(&s, &y, 0.3).map_err(|e| e.to_string())?;
        ensure(max_f == oracle.max_f, || {
            format!("case {case}: MaxF {max_f} vs {}", oracle.max_f)
        })?;
        let mae = metrics::mae(&s, &y).map_err(|e| e.to_string())?;
        ensure(mae == oracle.mae, || {
            format!("case {case}: MAE {mae} vs {}", oracle.mae)
        })?;
    }
    Ok("20 random 8x8 pairs: 256-point PR, MaxF and MAE identical to brute force".into())
}

// 5. Loss oracles

fn scalar_bce(s: &[f64], y: &[f64]) -> f64 {
    let fg = y.iter().filter(|&&v| v == 1.0).count() as f64;
    let bg = y.len() as f64 - fg;
    let beta = if bg == 0.0 {
        1.0
    } else if fg == 0.0 {
        0.0
    } else {
        (fg / bg).min(1.0)
    };
    let mut loss = 0.0;
    for (&p, &label) in s.iter().zip(y) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        if label == 1.0 {
            loss -= beta * p.ln();
        } else {
            loss -= (1.0 - beta) * (1.0 - p).ln();
        }
    }
    loss
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let s = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(0.01..0.99));
        let y = match case {
            0 => Tensor::ones(&[1, 4, 4]),
            1 => Tensor::zeros(&[1, 4, 4]),
            2 => Tensor::from_fn(&[1, 4, 4], |i| if i < 12 { 1.0 } else { 0.0 }),
            _ => Tensor::from_fn(&[1, 4, 4], |_| if rng.gen_bool(0.35) { 1.0 } else { 0.0 }),
        };
        let got = balanced_bce_value(&s, &y, BetaConvention::Ratio).map_err(|e| e.to_string())?;
        let want = scalar_bce(s.data(), y.data());
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-10, || format!("case {case}: {got} vs {want}"))?;
    }
    Ok(format!(
        "10 random 4x4 cases incl. all-fg/all-bg, max abs diff {worst:e}"
    ))
}

// 6. Overfit

fn joint_column(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .expect("joint column")
                .parse()
                .expect("float")
        })
        .collect()
}

fn overfit(tmp: &Path) -> Outcome {
    let data = tmp.join("overfit-data");
    let run = tmp.join("overfit-run");
    run_cli(&[
        "synth",
        "--count",
        "1",
        "--size",
        "96",
        "--seed",
        "7",
        "--out",
        path_str(&data),
    ])?;
    let manifest = data.join("manifest.json");
    run_cli(&[
        "train",
        "--manifest",
        path_str(&manifest),
        "--steps",
        "500",
        "--lr",
        "1e-3",
        "--batch-size",
        "1",
        "--no-augment",
        "--checkpoint-every",
        "100",
        "--seed",
        "7",
        "--out",
        path_str(&run),
    ])?;
    let losses =
        joint_column(&fs::read_to_string(run.join("loss.csv")).map_err(|e| e.to_string())?);
    let (first, last) = (losses[0], *losses.last().expect("500 steps"));
    let ratio = last / first;

    let params = load_checkpoint(run.join("checkpoint.cfpn")).map_err(|e| e.to_string())?;
    let image = data_io::read_image(data.join("images/00000.ppm")).map_err(|e| e.to_string())?;
    let mask = data_io::read_mask(data.join("masks/00000.pgm")).map_err(|e| e.to_string())?;
    let pred = predict(&params, &ModelConfig::default(), &image).map_err(|e| e.to_string())?;
    let mae = metrics::mae(&pred.local, &mask).map_err(|e| e.to_string())?;
    let summary = format!(
        "{} steps, joint loss {first:.3} -> {last:.4} ({:.2}% of initial), S_l MAE {mae:.4}",
        losses.len(),
        100.0 * ratio
    );
    ensure(losses.len() == 500 && ratio < 0.02 && mae < 0.02, || {
        summary.clone()
    })?;
    Ok(summary)
}

// 7. Scaled-down ablation (reported, not gated)

fn test_mae(params: &ModelParams, config: &ModelConfig, manifest: &Path) -> Result<f64, String> {
    let m = data_io::DatasetManifest::load(manifest).map_err(|e| e.to_string())?;
    let samples = m.load_samples().map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for s in &samples {
        let pred = predict(params, config, &s.image).map_err(|e| e.to_string())?;
        total += metrics::mae(&pred.local, &s.mask).map_err(|e| e.to_string())?;
    }
    Ok(total / samples.len() as f64)
}

fn ablation_direction(tmp: &Path) -> Outcome {
    let steps = std::env::var("CFPN_ABLATION_STEPS").unwrap_or_else(|_| "600".into());
    let train_dir = tmp.join("ablation-train");
    let test_dir = tmp.join("ablation-test");
    run_cli(&[
        "synth",
        "--count",
        "200",
        "--size",
        "96",
        "--seed",
        "100",
        "--out",
        path_str(&train_dir),
    ])?;
    run_cli(&[
        "synth",
        "--count",
        "50",
        "--size",
        "96",
        "--seed",
        "200",
        "--out",
        path_str(&test_dir),
    ])?;
    let mut results = Vec::new();
    for (label, variant, cfd) in [
        ("full D+CFD{0..4}", "D", "0,1,2,3,4"),
        ("plain FPN", "A", "none"),
    ] {
        let run = tmp.join(format!("ablation-{variant}"));
        let start = Instant::now();
        run_cli(&[
            "train",
            "--manifest",
            path_str(&train_dir.join("manifest.json")),
            "--steps",
            &steps,
            "--lr",
            "1e-3",
            "--cfa-variant",
            variant,
            "--cfd-levels",
            cfd,
            "--seed",
            "1",
            "--out",
            path_str(&run),
        ])?;
        let config = ModelConfig {
            cfa_variant: variant.parse().map_err(|e: cfpn::Error| e.to_string())?,
            cfd: if cfd == "none" {
                None
            } else {
                Some(cfd.parse().map_err(|e: cfpn::Error| e.to_string())?)
            },
            ..ModelConfig::default()
        };
        let params = load_checkpoint(run.join("checkpoint.cfpn")).map_err(|e| e.to_string())?;
        let mae = test_mae(&params, &config, &test_dir.join("manifest.json"))?;
        results.push((label, mae, start.elapsed().as_secs()));
    }
    let (full, base) = (results[0].1, results[1].1);
    let text =
        format!(
        "test MAE {}: {full:.4} ({}s), {}: {base:.4} ({}s); {steps} steps x batch 2, lr 1e-3; {}",
        results[0].0,
        results[0].2,
        results[1].0,
        results[1].2,
        if full <= base { "full <= baseline" } else { "full > baseline" }
    );
    Ok(text)
}

// 8. Determinism

fn determinism(tmp: &Path) -> Outcome {
    let config = tmp.join("det-config.json");
    fs::write(
        &config,
        r#"{"input_size": 32, "steps": 3, "batch_size": 2}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut runs: Vec<PathBuf> = Vec::new();
    for k in 0..2 {
        let base = tmp.join(format!("det-{k}"));
        let data = base.join("data");
        let run = base.join("run");
        let pred = base.join("pred");
        let cfg = path_str(&config);
        run_cli(&[
            "synth",
            "--config",
            cfg,
            "--count",
            "3",
            "--seed",
            "9",
            "--out",
            path_str(&data),
        ])?;
        run_cli(&[
            "train",
            "--config",
            cfg,
            "--manifest",
            path_str(&data.join("manifest.json")),
            "--seed",
            "9",
            "--out",
            path_str(&run),
        ])?;
        run_cli(&[
            "infer",
            "--config",
            cfg,
            "--checkpoint",
            path_str(&run.join("checkpoint.cfpn")),
            "--emit-global",
            "--out",
            path_str(&pred),
            path_str(&data.join("images/00000.ppm")),
            path_str(&data.join("images/00001.ppm")),
        ])?;
        runs.push(base);
    }
    let files = [
        "data/images/00002.ppm",
        "data/masks/00002.pgm",
        "run/loss.csv",
        "run/checkpoint.cfpn",
        "pred/00000.pgm",
        "pred/00001.pgm",
        "pred/00001_global.pgm",
    ];
    for f in files {
        let a = fs::read(runs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(runs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical across two seeded runs",
        files.len()
    ))
}

fn main() {
    // `cargo test -- --list` and filters: behave like an empty harness
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let ablation = std::env::var("CFPN_ABLATION").is_ok_and(|v| v == "1");

    // (id, name, gated, time budget in seconds, check)
    let criteria: Vec<Criterion<'_>> = vec![
        (
            1,
            "gradient fidelity",
            true,
            300.0,
            Box::new(|| gradient_fidelity(tmp)),
        ),
        (2, "shape contract", true, 60.0, Box::new(shape_contract)),
        (
            3,
            "ablation reductions",
            true,
            60.0,
            Box::new(ablation_reductions),
        ),
        (4, "metric oracles", true, 60.0, Box::new(metric_oracles)),
        (5, "loss oracles", true, 60.0, Box::new(loss_oracles)),
        (
            6,
            "overfit single sample",
            true,
            600.0,
            Box::new(|| overfit(tmp)),
        ),
        (
            7,
            "ablation direction (reported)",
            false,
            3600.0,
            Box::new(|| ablation_direction(tmp)),
        ),
        (8, "determinism", true, 60.0, Box::new(|| determinism(tmp))),
    ];

    let mut failed = 0;
    for (id, name, gated, budget, check) in criteria {
        if !gated && !ablation {
            println!("criterion {id} {name}: SKIP (set CFPN_ABLATION=1 to run; not gated)");
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > budget => {
                Err(format!("{detail}; took {secs:.0}s, budget {budget:.0}s"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) if gated => println!("criterion {id} {name}: PASS [{secs:.1}s] {detail}"),
            Ok(detail) => println!("criterion {id} {name}: REPORT [{secs:.1}s] {detail}"),
            Err(detail) if gated => {
                failed += 1;
                println!("criterion {id} {name}: FAIL [{secs:.1}s] {detail}");
            }
            Err(detail) => println!("criterion {id} {name}: REPORT-ERROR [{secs:.1}s] {detail}"),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all gated acceptance criteria passed");
}
