use std::fs;
use std::path::{Path, PathBuf};

use voxflow::autodiff::OpKind;
use voxflow::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use voxflow::data::DatasetManifest;
use voxflow::gradsuite::run_gradient_suite;
use voxflow::harness::experiment::aggregate_rows;
use voxflow::harness::{
    baseline_csv, check_folds, evaluate_subjects, make_folds, metrics_csv, run_baseline, run_experiment, synth_generate,
    BaselineConfig, Corpus, ExperimentConfig, MetricsRow, Split,
};
use voxflow::{Error, Real, Result};

use crate::config::{Precision, RunConfig};

/// Exit code for a failed gradient check (distinct from the error classes).
pub const GRADCHECK_FAILED: u8 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let resolved = cfg.out.join("run-config.resolved");
    fs::write(&resolved, cfg.resolved()).map_err(|e| io_err(&resolved, e))?;
    Ok(cfg.out.clone())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn input_paths(cfg: &RunConfig) -> Result<(&Path, &Path)> {
    let manifest = cfg.manifest.as_deref().ok_or_else(|| Error::Config("no manifest given (--manifest)".into()))?;
    let mask = cfg.mask.as_deref().ok_or_else(|| Error::Config("no mask given (--mask)".into()))?;
    Ok((manifest, mask))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let (manifest, mask) = input_paths(cfg)?;
    Corpus::load(manifest, mask)
}

fn summarize(rows: &[MetricsRow]) {
    for r in rows.iter().filter(|r| r.fold == "pooled") {
        let m = &r.metrics;
        println!(
            "pooled {:<7} accuracy {:.4}  fpr {:.4}  fnr {:.4}  (n = {})",
            m.level.name(),
            m.accuracy,
            m.fpr,
            m.fnr,
            m.total()
        );
    }
}

pub fn synth(cfg: &RunConfig) -> Result<u8> {
    let out = prepare_out(cfg)?;
    let o = synth_generate(&cfg.synth, &out)?;
    let s = &cfg.synth;
    println!("manifest: {}", o.manifest_path.display());
    println!("mask: {}", o.mask_path.display());
    println!(
        "{} subjects x {} runs, grid {}x{}x{}, {} frames, snr {}, {} in-mask voxels{}",
        s.subjects,
        s.runs,
        s.grid[0],
        s.grid[1],
        s.grid[2],
        s.frames,
        s.snr,
        o.data.mask.count(),
        if s.snr == 0.0 { " (no signal)" } else if s.shuffle_labels { " (labels shuffled)" } else { "" }
    );
    Ok(0)
}

pub fn train(cfg: &RunConfig) -> Result<u8> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> Result<u8> {
    let corpus = load_corpus(cfg)?;
    let out = prepare_out(cfg)?;
    let exp = ExperimentConfig {
        spec: cfg.spec()?,
        train: cfg.train.clone(),
        optim: cfg.optim,
        only_folds: cfg.only_folds.clone(),
    };
    eprintln!("training {} on {} subjects, {} folds", exp.spec, corpus.subjects().len(), cfg.train.folds);
    let result = run_experiment::<T>(&corpus, &exp, |r| {
        let path = out.join(format!("fold-{}.ck", r.split.fold));
        let ck = Checkpoint {
            model: r.model.clone(),
            mask: corpus.mask.clone(),
            window: cfg.train.window,
            adam: Some(r.adam.clone()),
            stats: Some(r.stats.clone()),
        };
        write_checkpoint(&path, &ck)?;
        eprintln!(
            "fold {}: best epoch {}, test window accuracy {:.4}, subject accuracy {:.4}",
            r.split.fold, r.best_epoch, r.test_window.accuracy, r.test_subject.accuracy
        );
        Ok(())
    })?;
    write(&out.join("metrics.csv"), &metrics_csv(&result.rows))?;
    summarize(&result.rows);
    println!("metrics: {}", out.join("metrics.csv").display());
    Ok(0)
}

pub fn eval(cfg: &RunConfig) -> Result<u8> {
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg),
        Precision::F64 => eval_as::<f64>(cfg),
    }
}

fn eval_as<T: Real>(cfg: &RunConfig) -> Result<u8> {
    let path = cfg.checkpoint.as_deref().ok_or_else(|| Error::Config("no checkpoint given (--checkpoint)".into()))?;
    let ck: Checkpoint<T> = read_checkpoint(path)?;
    let corpus = load_corpus(cfg)?;
    if corpus.mask != ck.mask {
        return Err(Error::Data("the dataset mask differs from the checkpoint's mask".into()));
    }
    let out = prepare_out(cfg)?;
    let subjects: Vec<String> = corpus.subjects().into_iter().map(|s| s.0).collect();
    let stats = match &ck.stats {
        Some(s) => s.clone(),
        None => corpus.stats(cfg.train.normalization, Some(&subjects))?,
    };
    let (w, s) = evaluate_subjects(&corpus, &ck.model, &stats, &subjects, ck.window, cfg.train.workers)?;
    let mut rows: Vec<MetricsRow> = [w, s]
        .into_iter()
        .map(|metrics| MetricsRow { fold: "eval".into(), epoch: "checkpoint".into(), split: Split::Test, metrics })
        .collect();
    rows.extend(aggregate_rows(&[(w, s)])?.into_iter().filter(|r| r.fold == "pooled"));
    write(&out.join("eval-metrics.csv"), &metrics_csv(&rows))?;
    eprintln!("evaluated {} ({} frames per window) on {} subjects", ck.model.spec, ck.window, subjects.len());
    summarize(&rows);
    Ok(0)
}

pub fn baseline(cfg: &RunConfig) -> Result<u8> {
    let corpus = load_corpus(cfg)?;
    let out = prepare_out(cfg)?;
    let bc = BaselineConfig {
        train: cfg.train.clone(),
        rate: cfg.supervoxel_rate,
        levels: cfg.baseline_level,
        tol: cfg.svm_tol,
        kernels: cfg.svm_kernels.clone(),
    };
    let rows = run_baseline(&corpus, &bc)?;
    write(&out.join("baseline-metrics.csv"), &baseline_csv(&rows))?;
    for r in rows.iter().filter(|r| r.row.fold == "pooled") {
        let m = &r.row.metrics;
        println!("{:<16} {:<7} accuracy {:.4}  fpr {:.4}  fnr {:.4}", r.model, m.level.name(), m.accuracy, m.fpr, m.fnr);
    }
    println!("metrics: {}", out.join("baseline-metrics.csv").display());
    Ok(0)
}

pub fn gradcheck(corrupt: Option<&str>) -> Result<u8> {
    let corrupt = match corrupt {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| OpKind::DIFFERENTIABLE.contains(k))
                .ok_or_else(|| Error::Config(format!("`{name}` is not a differentiable operation")))?,
        ),
    };
    let report = run_gradient_suite(corrupt)?;
    println!("{:<14} {:<12} {:>12} {:>8}  result  shapes (seed)", "case", "op", "max rel err", "tol");
    for c in &report.cases {
        println!(
            "{:<14} {:<12} {:>12.3e} {:>8.0e}  {:<6}  {} ({})",
            c.name,
            c.op.map_or("-", |k| k.name()),
            c.outcome.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" },
            c.shapes,
            c.seed
        );
    }
    println!();
    for (op, err) in report.per_op() {
        println!("op {:<12} max rel err {err:.3e}", op.name());
    }
    let missing = report.missing_ops();
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|k| k.name()).collect();
        println!("not covered: {}", names.join(", "));
    }
    println!("covered {}/{} differentiable ops", OpKind::DIFFERENTIABLE.len() - missing.len(), OpKind::DIFFERENTIABLE.len());
    if report.passed() {
        println!("all gradient checks passed");
        return Ok(0);
    }
    for c in report.cases.iter().filter(|c| !c.passed()) {
        eprintln!(
            "FAILED {} (op {}, shapes {}, seed {}): rel err {:.3e}, analytic {:.6e} vs numeric {:.6e} at input {} element {}",
            c.name,
            c.op.map_or("-", |k| k.name()),
            c.shapes,
            c.seed,
            c.outcome.max_rel_error,
            c.outcome.analytic,
            c.outcome.numeric,
            c.outcome.worst.0,
            c.outcome.worst.1
        );
    }
    Ok(GRADCHECK_FAILED)
}

pub fn folds(cfg: &RunConfig) -> Result<u8> {
    let manifest = cfg.manifest.as_deref().ok_or_else(|| Error::Config("no manifest given (--manifest)".into()))?;
    let m = DatasetManifest::read(manifest)?;
    let subjects = m.subjects();
    let folds = make_folds(&subjects, cfg.train.folds, cfg.train.val_fraction, cfg.train.seed)?;
    check_folds(&folds, &subjects)?;
    for f in &folds {
        println!("fold {} test ({}): {}", f.fold, f.test.len(), f.test.join(" "));
        println!("fold {} val ({}): {}", f.fold, f.val.len(), f.val.join(" "));
        println!("fold {} train ({}): {}", f.fold, f.train.len(), f.train.join(" "));
    }
    println!("{} subjects, {} folds, subject-disjoint", subjects.len(), folds.len());
    Ok(0)
}
