use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cfpn::backbone::check_input_size;
use cfpn::data_io::{self, DatasetManifest};
use cfpn::gradcheck::{self, GradCheckConfig, GradCheckReport};
use cfpn::metrics::evaluate;
use cfpn::training::checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
use cfpn::training::StepRecord;
use cfpn::{predict, train as run_training, ModelConfig, SaliencySample, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.cfpn";

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Config(e.to_string()))?;
    write_file(path, format!("{text}\n").as_bytes())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    input_size: usize,
    samples: usize,
    parameters: usize,
    initial_joint_loss: Option<f64>,
    final_joint_loss: Option<f64>,
    checkpoint: &'a Path,
}

pub fn loss_csv(trace: &[StepRecord]) -> String {
    let mut s = String::from("step,joint_loss,global_loss,local_loss\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.joint, r.global, r.local
        ));
    }
    s
}

pub fn train(c: &RunConfig) -> Result<(), Failure> {
    c.validate()?;
    let model = c.model()?;
    let manifest_path = c.manifest.as_ref().ok_or_else(|| {
        Failure::Config("manifest: not set; pass --manifest or set it in the config".into())
    })?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let samples = manifest.load_samples()?;
    for (entry, s) in manifest.entries.iter().zip(&samples) {
        let shape = s.image.shape();
        if shape[1] != c.input_size || shape[2] != c.input_size {
            return Err(Failure::Config(format!(
                "input_size: is {} but {} is {}x{}",
                c.input_size,
                entry.image.display(),
                shape[1],
                shape[2]
            )));
        }
    }

    create_dir(&c.out_dir)?;
    let checkpoint = c.out_dir.join(CHECKPOINT_FILE);
    let params = model.init_params(c.seed);
    let parameters = params.num_scalars();
    let train_config = c.train_config();
    eprintln!(
        "training {} samples, {parameters} parameters, {} steps",
        samples.len(),
        train_config.steps
    );
    let mut final_saved = false;
    let outcome = run_training(&model, params, &samples, &train_config, |epoch, p| {
        final_saved = (epoch + 1) % c.checkpoint_every == 0;
        if final_saved {
            save_checkpoint(&checkpoint, p)?;
            eprintln!("epoch {epoch} done, checkpoint saved");
        }
        Ok(())
    })?;
    if !final_saved {
        save_checkpoint(&checkpoint, &outcome.params)?;
    }

    write_file(
        &c.out_dir.join("loss.csv"),
        loss_csv(&outcome.trace).as_bytes(),
    )?;
    let summary = TrainSummary {
        model: &model,
        train: &train_config,
        input_size: c.input_size,
        samples: samples.len(),
        parameters,
        initial_joint_loss: outcome.trace.first().map(|r| r.joint),
        final_joint_loss: outcome.trace.last().map(|r| r.joint),
        checkpoint: &checkpoint,
    };
    write_json(&c.out_dir.join("summary.json"), &summary)?;
    if let (Some(a), Some(b)) = (summary.initial_joint_loss, summary.final_joint_loss) {
        println!("joint loss {a} -> {b}");
    }
    Ok(())
}

pub fn infer(c: &RunConfig, images: &[PathBuf]) -> Result<(), Failure> {
    c.validate()?;
    let model = c.model()?;
    let path = c.checkpoint.as_ref().ok_or_else(|| {
        Failure::Config("checkpoint: not set; pass --checkpoint or set it in the config".into())
    })?;
    let params = load_checkpoint(path)?;
    check_compatible(&params, &model.init_params(0))?;
    create_dir(&c.out_dir)?;
    for image_path in images {
        let image = data_io::read_image(image_path)?;
        let shape = image.shape();
        check_input_size(shape[1], shape[2])
            .map_err(|e| Failure::Config(format!("{}: {e}", image_path.display())))?;
        let pred = predict(&params, &model, &image)?;
        let stem = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let local = c.out_dir.join(format!("{stem}.pgm"));
        data_io::write_saliency(&local, &pred.local)?;
        println!("{}", local.display());
        if c.emit_global {
            let global = c.out_dir.join(format!("{stem}_global.pgm"));
            data_io::write_saliency(&global, &pred.global)?;
            println!("{}", global.display());
        }
    }
    Ok(())
}

fn pgm_names(dir: &Path) -> Result<BTreeSet<String>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let p = entry.map_err(|e| io_failure(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "pgm") {
            names.insert(p.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

pub fn eval(c: &RunConfig, pred_dir: &Path, gt_dir: &Path) -> Result<(), Failure> {
    let (preds, gts) = (pgm_names(pred_dir)?, pgm_names(gt_dir)?);
    if preds != gts {
        let only = |a: &BTreeSet<String>, b: &BTreeSet<String>| {
            a.difference(b).cloned().collect::<Vec<_>>().join(", ")
        };
        return Err(Failure::Config(format!(
            "file names differ; only in predictions: [{}]; only in ground truth: [{}]",
            only(&preds, &gts),
            only(&gts, &preds)
        )));
    }
    let mut loaded = Vec::with_capacity(preds.len());
    for name in &preds {
        let s = data_io::read_saliency(pred_dir.join(name))?;
        let y = data_io::read_mask(gt_dir.join(name))?;
        loaded.push((name.clone(), s, y));
    }
    let report = evaluate(
        loaded.iter().map(|(n, s, y)| (n.as_str(), s, y)),
        c.metric_beta2,
        c.aggregation,
    )?;
    create_dir(&c.out_dir)?;
    write_json(&c.out_dir.join("report.json"), &report)?;
    if let Some(curve) = &report.curve {
        let path = c.out_dir.join("pr_curve.csv");
        let mut buf = Vec::new();
        curve
            .write_csv(&mut buf)
            .map_err(|e| io_failure(&path, e))?;
        write_file(&path, &buf)?;
    }
    println!(
        "images {} max_f {} mae {}",
        report.images.len(),
        report.max_f,
        report.mae
    );
    Ok(())
}

#[derive(Serialize)]
struct GradCheckSummary<'a> {
    passed: bool,
    tolerance: f64,
    step: f64,
    ops: &'a GradCheckReport,
    model: &'a GradCheckReport,
}

pub const GRADCHECK_SIZE: usize = 32;

pub fn gradcheck(c: &RunConfig) -> Result<(), Failure> {
    c.validate()?;
    let model = c.model()?;
    let op_config = GradCheckConfig {
        seed: c.seed,
        ..GradCheckConfig::default()
    };
    let ops = gradcheck::op_gradcheck(&op_config)?;

    let mut params = model.init_params(c.seed);
    gradcheck::offset_bn_shifts(&mut params, c.seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let s = data_io::synth_sample(&mut rng, GRADCHECK_SIZE);
    let sample = SaliencySample::new(s.image, s.mask)?;
    let model_config = GradCheckConfig {
        max_entries: Some(c.gradcheck_entries.max(1)),
        ..op_config.clone()
    };
    let full = gradcheck::model_gradcheck(&model, &params, &sample, &model_config)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (group, report) in [("op", &ops), ("param", &full)] {
        for t in &report.tensors {
            let status = if t.max_rel_error < report.tolerance && t.checked > 0 {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                out,
                "{status:4} {group} {} checked {}/{} kinks {} max_rel_err {:.3e}",
                t.name, t.checked, t.numel, t.skipped_kinks, t.max_rel_error
            );
        }
    }
    let passed = ops.passed() && full.passed();
    create_dir(&c.out_dir)?;
    write_json(
        &c.out_dir.join("gradcheck.json"),
        &GradCheckSummary {
            passed,
            tolerance: op_config.tolerance,
            step: op_config.step,
            ops: &ops,
            model: &full,
        },
    )?;
    let worst = ops
        .tensors
        .iter()
        .chain(&full.tensors)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty report");
    let _ = writeln!(
        out,
        "max relative error {:.3e} ({}: analytic {:e}, numeric {:e})",
        worst.max_rel_error, worst.name, worst.analytic, worst.numeric
    );
    if passed {
        Ok(())
    } else {
        let failed = ops.failures().chain(full.failures()).count();
        Err(Failure::Check(format!(
            "gradient check failed for {failed} tensors; worst offender {} with relative error {:e} (analytic {:e}, numeric {:e})",
            worst.name, worst.max_rel_error, worst.analytic, worst.numeric
        )))
    }
}

pub fn synth(c: &RunConfig, count: usize) -> Result<(), Failure> {
    check_input_size(c.input_size, c.input_size)
        .map_err(|e| Failure::Config(format!("size: {e}")))?;
    let manifest = data_io::synth_dataset(&c.out_dir, count, c.input_size, c.seed)?;
    println!("{}", c.out_dir.join("manifest.json").display());
    eprintln!(
        "{} samples at {}x{}",
        manifest.entries.len(),
        c.input_size,
        c.input_size
    );
    Ok(())
}
