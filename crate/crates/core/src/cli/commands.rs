use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::{OutputDir, RunManifest};
use super::{Ablation, BenchArgs, CheckArgs, Command, CommonArgs, DemoArgs, JsonReport, Suite, TrainArgs};
use super::{JSON_REPORT_FILE, TEXT_REPORT_FILE};
use crate::attention::{emim_forward, global_attention_forward, EmimConfig, EmimParams, GlobalParams, TokenVolume, VolumeDims};
use crate::block::{save_checkpoint, BlockPattern, ModelConfig};
use crate::error::{Error, Result};
use crate::synthetic::{recovery_sweep, DatasetSpec};
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, ToyExperiment, TrainConfig};
use crate::verify::{
    grad_suite, instrumented_count, invariant_suite, mac_count, oracle_equivalence, Mechanism, DEFAULT_GRAD_TOLERANCE,
    DEFAULT_ORACLE_TOLERANCE, NORMALIZATION_TOLERANCE,
};

/// Runs one command; `Ok(false)` means a gate failed.
pub(super) fn dispatch(command: &Command, argv: &[String], out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Check(a) => check(a, argv, out),
        Command::Bench(a) => bench(a, argv, out),
        Command::DemoDisplacement(a) => demo(a, argv, out),
        Command::TrainToy(a) => train_toy(a, argv, out),
    }
}

fn manifest(argv: &[String], common: &CommonArgs) -> Result<RunManifest> {
    if common.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    let mut m = RunManifest::new(argv, common.seed);
    m.set("threads_requested", common.threads);
    m.set("execution", "serial");
    Ok(m)
}

fn emit(out: &mut dyn Write, dir: &mut OutputDir<'_>, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    dir.write(TEXT_REPORT_FILE, text)
}

fn check(a: &CheckArgs, argv: &[String], out: &mut dyn Write) -> Result<bool> {
    let seed = a.common.seed;
    let mut m = manifest(argv, &a.common)?;
    m.set("suite", format!("{:?}", a.suite).to_lowercase());
    m.set("trials", a.trials);
    if let Some(t) = a.tolerance {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::config("--tolerance must be positive"));
        }
        m.set("tolerance_override", t);
    }
    let mut dir = OutputDir::create(&a.common.out, m)?;
    let mut text = String::new();
    let mut reports = Vec::new();
    let run_grad = matches!(a.suite, Suite::Grad | Suite::All);
    let run_oracle = matches!(a.suite, Suite::Oracle | Suite::All);
    let run_inv = matches!(a.suite, Suite::Invariants | Suite::All);

    if run_grad {
        let tol = a.tolerance.unwrap_or(DEFAULT_GRAD_TOLERANCE);
        let suite = grad_suite(seed, tol)?;
        let _ = writeln!(text, "[grad] seed = {seed}, tolerance = {tol:e} (relative)");
        let _ = writeln!(text, "{:<44} {:>8} {:>12} {:>12}  ok", "parameter", "coords", "max_rel", "max_abs");
        for r in &suite {
            for p in &r.params {
                let _ = writeln!(
                    text,
                    "{:<44} {:>8} {:>12.3e} {:>12.3e}  {}",
                    format!("{}/{}", r.target, p.name),
                    p.checked,
                    p.max_rel_err,
                    p.max_abs_err,
                    if p.passed { "yes" } else { "NO" }
                );
            }
        }
        let passed = suite.iter().all(|r| r.passed());
        reports.push(JsonReport {
            max_rel_err: suite.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max),
            max_abs_err: suite.iter().map(|r| r.max_abs_err()).fold(0.0, f64::max),
            tolerance: tol,
            passed,
            failing_seed: (!passed).then_some(seed),
        });
        text.push('\n');
    }
    if run_oracle {
        let tol = a.tolerance.unwrap_or(DEFAULT_ORACLE_TOLERANCE);
        let r = oracle_equivalence(a.trials, seed, tol)?;
        let _ = writeln!(text, "[oracle] seed = {seed}, trials = {}, tolerance = {tol:e} (absolute)", r.trials.len());
        let _ = writeln!(text, "max_abs_err = {:.3e}", r.max_abs_err());
        let _ = writeln!(text, "max_rel_err = {:.3e}", r.max_rel_err());
        let _ = writeln!(text, "max_row_sum_err = {:.3e}", r.max_norm_sum_err());
        if let Some(f) = r.failing() {
            let _ = writeln!(text, "first failing case (replay with its seed):\n{}", f.case.to_text());
        }
        reports.push(JsonReport {
            max_rel_err: r.max_rel_err(),
            max_abs_err: r.max_abs_err(),
            tolerance: tol,
            passed: r.passed(),
            failing_seed: r.failing().map(|t| t.case.seed),
        });
        text.push('\n');
    }
    if run_inv {
        let r = invariant_suite(a.trials, seed)?;
        let _ = writeln!(text, "[invariants] seed = {seed}, trials = {}", a.trials);
        for c in &r.checks {
            let _ = writeln!(text, "{:<22} {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
        reports.push(JsonReport {
            max_rel_err: 0.0,
            max_abs_err: r.max_abs_err(),
            tolerance: NORMALIZATION_TOLERANCE,
            passed: r.passed(),
            failing_seed: r.failing_seed(),
        });
        text.push('\n');
    }
    let merged = JsonReport::merge(&reports);
    let _ = writeln!(text, "passed = {}", merged.passed);
    dir.write(JSON_REPORT_FILE, &merged.to_json())?;
    emit(out, &mut dir, &text)?;
    dir.finish()?;
    Ok(merged.passed)
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn bench(a: &BenchArgs, argv: &[String], out: &mut dyn Write) -> Result<bool> {
    let dims = VolumeDims {
        frames: a.frames,
        height: a.size,
        width: a.size,
        channels: a.channels,
    };
    if dims.tokens() == 0 || dims.channels == 0 {
        return Err(Error::config("bench volume must be nonempty"));
    }
    let base = a.window.config();
    base.validate(dims)?;
    let motion = a.ablate != Some(Ablation::Motion);
    let mechanisms: Vec<Mechanism> = a.mechanism.map_or(Mechanism::ALL.to_vec(), |m| vec![m]);
    let mut m = manifest(argv, &a.common)?;
    m.set("frames", a.frames);
    m.set("size", a.size);
    m.set("channels", a.channels);
    m.set("repeats", a.repeats);
    m.set("motion", motion);
    for line in base.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            m.set(k, v);
        }
    }
    let mut dir = OutputDir::create(&a.common.out, m)?;

    let n = dims.tokens() as u64;
    let d = dims.channels as u64;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "volume T={} H={} W={} d={} (N={n}), radius {}, heads {}, motion {}",
        a.frames, a.size, a.size, a.channels, base.radius, base.heads, motion
    );
    let _ = writeln!(
        text,
        "{:<12} {:>14} {:>14} {:>14} {:>14} {:>14}  instrumented",
        "mechanism", "projections", "affinity", "aggregation", "motion", "total"
    );
    let mut passed = true;
    let mut worst_gap = 0u64;
    let mut models = Vec::new();
    for &mech in &mechanisms {
        let cfg = mech.apply(&base);
        let model = mac_count(dims, &cfg, mech, motion);
        let counted = instrumented_count(dims, &cfg, mech, motion, a.common.seed)?;
        let ok = counted == model.counter();
        worst_gap = worst_gap.max(model.total().abs_diff(counted.total()));
        passed &= ok;
        let _ = writeln!(
            text,
            "{:<12} {:>14} {:>14} {:>14} {:>14} {:>14}  {}",
            mech.name(),
            model.projections,
            model.affinity,
            model.aggregation,
            model.motion,
            model.total(),
            if ok { "equal" } else { "MISMATCH" }
        );
        models.push(model);
    }
    let find = |k: Mechanism| models.iter().find(|m| m.mechanism == k);
    if let (Some(local), Some(dense)) = (find(Mechanism::Emim), find(Mechanism::Global)) {
        let unit = 2 * n * d;
        let _ = writeln!(
            text,
            "affinity+aggregation emim/global = {}/{} = {:.6}",
            local.attention() / unit,
            dense.attention() / unit,
            local.attention() as f64 / dense.attention() as f64
        );
        if (base.window_len() as u64) < n {
            let strict = local.attention() < dense.attention();
            passed &= strict;
            let _ = writeln!(text, "windowed strictly below dense: {strict}");
        }
    }
    if a.repeats > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
        let x = TokenVolume::from_tensor(Tensor::randn(&dims.shape(), 1.0, &mut rng))?;
        let _ = writeln!(text, "\n[timing] median of {} forward passes (informational)", a.repeats);
        for &mech in &mechanisms {
            let cfg = mech.apply(&base);
            let mut samples = Vec::with_capacity(a.repeats);
            match mech {
                Mechanism::Global => {
                    let p = GlobalParams::init(dims.channels, &mut rng);
                    for _ in 0..a.repeats {
                        let t = Instant::now();
                        global_attention_forward(&x, &p, cfg.heads)?;
                        samples.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                }
                Mechanism::Emim | Mechanism::NonSliding => {
                    let mut p = EmimParams::init(dims.channels, &cfg, &mut rng);
                    if !motion {
                        p = p.without_motion();
                    }
                    for _ in 0..a.repeats {
                        let t = Instant::now();
                        emim_forward(&x, &p, &cfg)?;
                        samples.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                }
            }
            let _ = writeln!(text, "{:<12} {:>10.3} ms", mech.name(), median_ms(samples));
        }
    }
    let _ = writeln!(text, "\npassed = {passed}");
    let report = JsonReport {
        max_rel_err: 0.0,
        max_abs_err: worst_gap as f64,
        tolerance: 0.0,
        passed,
        failing_seed: (!passed).then_some(a.common.seed),
    };
    dir.write(JSON_REPORT_FILE, &report.to_json())?;
    emit(out, &mut dir, &text)?;
    dir.finish()?;
    Ok(passed)
}

fn demo(a: &DemoArgs, argv: &[String], out: &mut dyn Write) -> Result<bool> {
    let cfg = EmimConfig {
        radius: a.radius,
        interval: a.interval,
        boundary: a.boundary,
        ..Default::default()
    };
    cfg.check()?;
    let mut m = manifest(argv, &a.common)?;
    m.set("radius", a.radius);
    m.set("interval", a.interval);
    m.set("boundary", a.boundary);
    m.set("trials", a.trials);
    m.set("size", a.size);
    m.set(
        "shifts",
        if a.shifts.is_empty() {
            "window".to_string()
        } else {
            a.shifts.iter().map(|(x, y)| format!("{x},{y}")).collect::<Vec<_>>().join(" ")
        },
    );
    let entries = recovery_sweep(&cfg, &a.shifts, a.trials, a.size, a.common.seed)?;
    let mut dir = OutputDir::create(&a.common.out, m)?;
    let mut text = String::new();
    let _ = writeln!(text, "radius {}, interval {}, {} clips per shift, {}x{} frames", a.radius, a.interval, a.trials, a.size, a.size);
    let _ = writeln!(text, "{:>10}  {:>7}  predictions", "shift", "correct");
    let mut correct = 0;
    for group in entries.chunks(a.trials.max(1)) {
        let shift = group[0].shift;
        let ok = group.iter().filter(|e| e.correct()).count();
        correct += ok;
        let preds: Vec<String> = group.iter().map(|e| format!("{:?}", e.result.predicted)).collect();
        let _ = writeln!(text, "{:>10}  {:>3}/{:<3}  {}", format!("{shift:?}"), ok, group.len(), preds.join(" "));
    }
    let passed = correct == entries.len() && !entries.is_empty();
    let _ = writeln!(text, "\nrecovered {correct}/{}", entries.len());
    let _ = writeln!(text, "passed = {passed}");
    let report = JsonReport {
        max_rel_err: 0.0,
        max_abs_err: (entries.len() - correct) as f64,
        tolerance: 0.0,
        passed,
        failing_seed: entries.iter().find(|e| !e.correct()).map(|e| e.seed),
    };
    dir.write(JSON_REPORT_FILE, &report.to_json())?;
    emit(out, &mut dir, &text)?;
    dir.finish()?;
    Ok(passed)
}

/// The experiment a `train-toy` invocation describes.
pub(super) fn experiment(a: &TrainArgs) -> Result<ToyExperiment> {
    let defaults = TrainConfig::default();
    let mut emim = a.window.config();
    let pattern = match a.mechanism {
        Mechanism::Global => "O".parse::<BlockPattern>()?,
        Mechanism::Emim => a.pattern.clone(),
        Mechanism::NonSliding => {
            emim = Mechanism::NonSliding.apply(&emim);
            a.pattern.clone()
        }
    };
    let exp = ToyExperiment {
        model: ModelConfig {
            depth: a.depth,
            channels: a.channels,
            emim,
            pattern,
            num_classes: a.classes,
            ablate_motion: a.ablate == Some(Ablation::Motion),
            ..Default::default()
        },
        data: DatasetSpec {
            clips: a.clips,
            classes: a.classes,
            frames: a.frames,
            height: a.size,
            width: a.size,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: a.epochs.unwrap_or(defaults.epochs),
            lr: a.lr.unwrap_or(defaults.lr),
            batch_size: a.batch_size.unwrap_or(defaults.batch_size),
            ..defaults
        },
        init_seed: 0,
    };
    exp.model.validate()?;
    Ok(exp.with_seed(a.common.seed))
}

fn metrics_line(m: &EpochMetrics) -> String {
    format!("{:>5} {:>12.6} {:>10.4} {:>10.4}", m.epoch + 1, m.train_loss, m.train_acc, m.val_acc)
}

fn train_toy(a: &TrainArgs, argv: &[String], out: &mut dyn Write) -> Result<bool> {
    let exp = experiment(a)?;
    let mut m = manifest(argv, &a.common)?;
    m.set("mechanism", a.mechanism);
    for line in exp.model.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            m.set(k, v);
        }
    }
    m.set("clips", exp.data.clips);
    m.set("frames", exp.data.frames);
    m.set("size", exp.data.height);
    m.set("epochs", exp.train.epochs);
    m.set("lr", exp.train.lr);
    m.set("batch_size", exp.train.batch_size);
    m.set("warmup_frac", exp.train.warmup_frac);
    m.set("center_clips", exp.train.center_clips);
    let mut dir = OutputDir::create(&a.common.out, m)?;
    let header = format!("{:>5} {:>12} {:>10} {:>10}\n", "epoch", "train_loss", "train_acc", "val_acc");
    out.write_all(header.as_bytes())?;
    let mut lines = Vec::new();
    let result = exp.run(|e| {
        let line = metrics_line(e);
        let _ = writeln!(out, "{line}");
        lines.push(line);
    });
    let (model, report) = match result {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => {
            let mut text = header.clone();
            text.extend(lines.iter().map(|l| format!("{l}\n")));
            let _ = writeln!(text, "{e}");
            dir.write(TEXT_REPORT_FILE, &text)?;
            dir.finish()?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let mut text = format!("initial val_acc = {:.4}\n", report.initial_val_acc);
    text.push_str(&header);
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    let _ = writeln!(text, "final val_acc = {:.4}", report.final_val_acc());
    let _ = writeln!(out, "final val_acc = {:.4}", report.final_val_acc());
    dir.write(TEXT_REPORT_FILE, &text)?;
    let mut csv = String::from("epoch,train_loss,train_acc,val_acc\n");
    let _ = writeln!(csv, "0,,,{}", report.initial_val_acc);
    for e in &report.epochs {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch + 1, e.train_loss, e.train_acc, e.val_acc);
    }
    dir.write("metrics.csv", &csv)?;
    if a.save {
        let path = a.common.out.join("checkpoint");
        save_checkpoint(&model, &path)?;
        dir.track(path);
    }
    dir.finish()?;
    Ok(true)
}
