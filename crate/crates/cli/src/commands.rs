use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use sha2::{Digest, Sha256};

use mlkd::audio::{build_noisy_manifest, gen_noise_bank, gen_synth_corpus, Manifest, NoiseSource};
use mlkd::checks::{gradient_report, CheckLine};
use mlkd::eval::{evaluate_grid, evaluate_records, snr_label, unweighted_accuracy};
use mlkd::experiment::{run_loso, LosoConfig};
use mlkd::model::{load_checkpoint, save_checkpoint};
use mlkd::train::{distill_student, load_examples, train_teacher, Example, TrainLog};

use crate::config::RunConfig;

type Result<T> = std::result::Result<T, String>;

fn err(e: mlkd::Error) -> String {
    e.to_string()
}

pub fn run(command: &str, cfg: &RunConfig, out: &Path, all: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let started = Instant::now();
    match command {
        "gen-corpus" => gen_corpus(cfg, out)?,
        "mix" => mix(cfg, out)?,
        "train-teacher" => teacher(cfg, out)?,
        "distill" => distill(cfg, out)?,
        "eval" => eval(cfg, out)?,
        "gradcheck" => gradcheck(cfg, out, all)?,
        "loso" => loso(cfg, out)?,
        other => return Err(format!("unknown command `{other}`")),
    }
    write(out.join("config.txt"), cfg.echo())?;
    let outputs = hash_tree(out)?;
    let record = json!({
        "command": command,
        "seed": cfg.seed()?,
        "outputs": outputs,
    });
    write(
        out.join("run.json"),
        serde_json::to_string_pretty(&record).unwrap() + "\n",
    )?;
    eprintln!(
        "{command}: done in {:.1}s, outputs in {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

/// SHA-256 of every file under `root` except the run record itself, keyed by
/// relative path.
fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "run.json" {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let digest = Sha256::digest(&bytes);
            out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
        }
    }
    Ok(out)
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    Manifest::load(cfg.path("manifest")?).map_err(err)
}

/// Splits records into (training, evaluation) by the `holdout` speakers.
/// Without a holdout both sides get every record.
fn split_holdout(cfg: &RunConfig, m: &Manifest) -> Result<(Manifest, Manifest)> {
    let holdout = cfg.list("holdout");
    if holdout.is_empty() {
        return Ok((m.clone(), m.clone()));
    }
    let (test, train): (Vec<_>, Vec<_>) = m
        .records
        .iter()
        .cloned()
        .partition(|r| holdout.contains(&r.speaker));
    if test.is_empty() {
        return Err(format!(
            "no records belong to the holdout speakers {holdout:?}"
        ));
    }
    Ok((m.with_records(train), m.with_records(test)))
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut manifest = gen_synth_corpus(&cfg.corpus()?, out).map_err(err)?;
    manifest.save(out.join("manifest.jsonl")).map_err(err)?;
    let noises = gen_noise_bank(
        &cfg.noise_kinds()?,
        cfg.get("noise_duration_s")?,
        cfg.get("sample_rate")?,
        cfg.seed()?,
        out.join("noises"),
    )
    .map_err(err)?;
    println!(
        "{} utterances, {} noise recordings",
        manifest.records.len(),
        noises.len()
    );
    Ok(())
}

fn mix(cfg: &RunConfig, out: &Path) -> Result<()> {
    let clean = load_manifest(cfg)?;
    let noises = load_noises(cfg)?;
    let mut noisy =
        build_noisy_manifest(&clean, &noises, &cfg.snrs()?, cfg.seed()?, out).map_err(err)?;
    noisy.save(out.join("manifest.jsonl")).map_err(err)?;
    println!("{} noisy utterances", noisy.records.len());
    Ok(())
}

fn load_noises(cfg: &RunConfig) -> Result<Vec<NoiseSource>> {
    let dir = cfg.path("noise_dir")?;
    let noises = NoiseSource::load_dir(&dir).map_err(err)?;
    if noises.is_empty() {
        return Err(format!("no WAV files in {}", dir.display()));
    }
    Ok(noises)
}

fn print_log(log: &TrainLog) {
    for e in &log.epochs {
        println!("epoch {} mean_loss {:.6}", e.epoch, e.mean_loss);
    }
}

fn teacher(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let (train, _) = split_holdout(cfg, &manifest)?;
    let model_cfg = cfg.model(manifest.n_classes())?;
    let train_cfg = cfg.train(model_cfg.n_blocks / 2)?;
    let data = load_examples(&train, false).map_err(err)?;
    let (model, log) = train_teacher(&data, &model_cfg, &train_cfg, None).map_err(err)?;
    save_checkpoint(&model, out.join("teacher.ckpt")).map_err(err)?;
    log.save(out.join("train_log.jsonl")).map_err(err)?;
    print_log(&log);
    Ok(())
}

fn distill(cfg: &RunConfig, out: &Path) -> Result<()> {
    let teacher = load_checkpoint(cfg.path("teacher")?).map_err(err)?;
    let manifest = load_manifest(cfg)?;
    let (train, _) = split_holdout(cfg, &manifest)?;
    let student_cfg = teacher.config().half_depth();
    let train_cfg = cfg.train(student_cfg.n_blocks)?;
    let with_clean = train_cfg.teacher_input == mlkd::train::TeacherInput::Clean;
    let data = load_examples(&train, with_clean).map_err(err)?;
    let (student, log) =
        distill_student(&teacher, &data, &student_cfg, &train_cfg, None).map_err(err)?;
    save_checkpoint(&student, out.join("student.ckpt")).map_err(err)?;
    log.save(out.join("train_log.jsonl")).map_err(err)?;
    for s in &log.steps {
        println!(
            "step {} l_mse {:.6} l_kl {:.6} l_ce {:.6} total {:.6}",
            s.step, s.loss.l_mse, s.loss.l_kl, s.loss.l_ce, s.loss.total
        );
    }
    print_log(&log);
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = cfg.path("checkpoint")?;
    let model = load_checkpoint(&ckpt).map_err(err)?;
    let manifest = load_manifest(cfg)?;
    let (_, test) = split_holdout(cfg, &manifest)?;
    let noises = load_noises(cfg)?;
    let snrs = cfg.snrs()?;
    let seed = cfg.seed()?;

    let clean = evaluate_records(&model, &test).map_err(err)?;
    for (path, reason) in &clean.skipped {
        eprintln!("skipped {path}: {reason}");
    }
    let clean_ua = unweighted_accuracy(&clean.confusion).map_err(err)?;
    let examples: Vec<Example> = test
        .records
        .iter()
        .filter(|r| clean.skipped.iter().all(|(p, _)| p != &r.path))
        .map(|r| load_examples(&test.with_records(vec![r.clone()]), false).map(|mut v| v.remove(0)))
        .collect::<mlkd::Result<_>>()
        .map_err(err)?;
    let grid = evaluate_grid(&model, &examples, &noises, &snrs, seed).map_err(err)?;
    write(out.join("grid.csv"), grid.to_csv())?;
    let results = json!({
        "seed": seed,
        "checkpoint": ckpt.to_string_lossy(),
        "checkpoint_hash": model.param_hash(),
        "model": model.config(),
        "evaluated": examples.len(),
        "skipped": clean.skipped.iter().map(|(p, r)| json!({"path": p, "reason": r})).collect::<Vec<_>>(),
        "clean_ua": clean_ua,
        "clean_confusion": clean.confusion,
        "grid": {
            "noise_types": grid.noise_types,
            "snr_levels": grid.snr_levels.iter().map(|&s| snr_label(s)).collect::<Vec<_>>(),
            "cells": grid.cells,
            "means": grid.means,
        },
    });
    write(
        out.join("results.json"),
        serde_json::to_string_pretty(&results).unwrap() + "\n",
    )?;
    println!("clean UA {:.2}%", 100.0 * clean_ua);
    print!("{}", grid.to_csv());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path, all: bool) -> Result<()> {
    let lines: Vec<CheckLine> = gradient_report(cfg.seed()?)
        .map_err(err)?
        .into_iter()
        .filter(|l| all || l.name.starts_with("primitive."))
        .collect();
    let mut report = String::new();
    for l in &lines {
        report.push_str(&format!(
            "{:<32} max_rel_error {:.3e} probes {:>3} {}\n",
            l.name,
            l.max_rel_error,
            l.probes,
            if l.passed() { "ok" } else { "FAIL" }
        ));
    }
    write(out.join("gradcheck.txt"), &report)?;
    print!("{report}");
    let failed = lines.iter().filter(|l| !l.passed()).count();
    if failed > 0 {
        return Err(format!(
            "{failed} gradient checks exceeded tolerance {}",
            mlkd::checks::TOLERANCE
        ));
    }
    Ok(())
}

fn loso(cfg: &RunConfig, out: &Path) -> Result<()> {
    let teacher = cfg.model(mlkd::audio::EMOTION_CLASSES.len())?;
    let train = cfg.train(teacher.n_blocks / 2)?;
    let max_folds: usize = cfg.get("max_folds")?;
    let loso_cfg = LosoConfig {
        corpus: cfg.corpus()?,
        noise_kinds: cfg.noise_kinds()?,
        noise_duration_s: cfg.get("noise_duration_s")?,
        snr_levels: cfg.snrs()?,
        teacher,
        teacher_train: train.clone(),
        student_train: train,
        max_folds: (max_folds > 0).then_some(max_folds),
    };
    let report = run_loso(&loso_cfg, out.join("work"), &mut |f| {
        println!(
            "fold {} teacher_clean_ua {:.4} distilled_ua {:.4} independent_ua {:.4}",
            f.speaker, f.teacher_clean_ua, f.distilled_ua, f.independent_ua
        )
    })
    .map_err(err)?;
    write(
        out.join("loso.json"),
        serde_json::to_string_pretty(&report).unwrap() + "\n",
    )?;
    println!(
        "mean teacher_clean_ua {:.4} distilled_ua {:.4} independent_ua {:.4}",
        report.mean_teacher_clean_ua, report.mean_distilled_ua, report.mean_independent_ua
    );
    Ok(())
}
