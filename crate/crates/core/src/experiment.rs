//! Leave-one-speaker-out comparison of a distilled student against a student
//! of the same shape trained without a teacher.

use std::path::Path;

use serde::Serialize;

use crate::audio::{
    build_noisy_manifest, gen_noise_bank, gen_synth_corpus, CorpusConfig, NoiseKind, NoiseSource,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, loso_indices, unweighted_accuracy};
use crate::model::{Model, ModelConfig};
use crate::train::{
    distill_student, load_examples, train_classifier, train_teacher, Example, TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LosoConfig {
    pub corpus: CorpusConfig,
    pub noise_kinds: Vec<NoiseKind>,
    pub noise_duration_s: f64,
    /// Training and test contamination levels.
    pub snr_levels: Vec<f64>,
    pub teacher: ModelConfig,
    pub teacher_train: TrainConfig,
    /// Shared by the distilled and the independent student.
    pub student_train: TrainConfig,
    /// Run only the first `n` folds when set.
    pub max_folds: Option<usize>,
}

impl LosoConfig {
    /// Desk scale: 10 speakers, two half-second utterances per class per
    /// speaker, 0 dB, seed 7.
    pub fn desk() -> Self {
        let teacher = ModelConfig::desk_teacher();
        let student_blocks = teacher.n_blocks / 2;
        let mut teacher_train = TrainConfig::desk(student_blocks);
        teacher_train.optimizer.lr = 2e-3;
        teacher_train.epochs = 8;
        let student_train = teacher_train.clone();
        Self {
            corpus: CorpusConfig {
                n_speakers: 10,
                utt_per_class_per_speaker: 2,
                duration_s: 0.5,
                sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
                seed: 7,
            },
            noise_kinds: NoiseKind::ALL.to_vec(),
            noise_duration_s: 2.0,
            snr_levels: vec![0.0],
            teacher,
            teacher_train,
            student_train,
            max_folds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldOutcome {
    pub speaker: String,
    /// Teacher on the held-out speaker's clean audio.
    pub teacher_clean_ua: f64,
    pub distilled_ua: f64,
    pub independent_ua: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LosoReport {
    pub folds: Vec<FoldOutcome>,
    pub mean_teacher_clean_ua: f64,
    pub mean_distilled_ua: f64,
    pub mean_independent_ua: f64,
}

/// Generates the corpus and its noisy copy under `work_dir`, then for each
/// held-out speaker trains a teacher on clean audio, distills a student on
/// noisy audio, trains an independent student (random init, cross-entropy
/// only) on the same noisy audio, and scores both students on the held-out
/// speaker's noisy audio.
pub fn run_loso(
    cfg: &LosoConfig,
    work_dir: impl AsRef<Path>,
    progress: &mut dyn FnMut(&FoldOutcome),
) -> Result<LosoReport> {
    let work_dir = work_dir.as_ref();
    let clean = gen_synth_corpus(&cfg.corpus, work_dir.join("corpus"))?;
    let noise_dir = work_dir.join("noises");
    gen_noise_bank(
        &cfg.noise_kinds,
        cfg.noise_duration_s,
        cfg.corpus.sample_rate,
        cfg.corpus.seed,
        &noise_dir,
    )?;
    let noises = NoiseSource::load_dir(&noise_dir)?;
    let noisy = build_noisy_manifest(
        &clean,
        &noises,
        &cfg.snr_levels,
        cfg.corpus.seed,
        work_dir.join("mixed"),
    )?;
    let examples = load_examples(&noisy, true)?;
    run_loso_on(cfg, &examples, progress)
}

/// [`run_loso`] over examples already in memory. Each example must carry its
/// clean source.
pub fn run_loso_on(
    cfg: &LosoConfig,
    examples: &[Example],
    progress: &mut dyn FnMut(&FoldOutcome),
) -> Result<LosoReport> {
    if examples.iter().any(|e| e.clean.is_none()) {
        return Err(Error::Invalid(
            "every example needs its clean source".into(),
        ));
    }
    let student_cfg = cfg.teacher.half_depth();
    let speakers: Vec<&str> = examples.iter().map(|e| e.speaker.as_str()).collect();
    let mut folds = Vec::new();
    for (speaker, train_idx, test_idx) in loso_indices(&speakers)?
        .into_iter()
        .take(cfg.max_folds.unwrap_or(usize::MAX))
    {
        let noisy_train: Vec<Example> = train_idx.iter().map(|&i| examples[i].clone()).collect();
        let clean_train: Vec<Example> = noisy_train.iter().map(as_clean).collect();
        let noisy_test: Vec<Example> = test_idx.iter().map(|&i| examples[i].clone()).collect();
        let clean_test: Vec<Example> = noisy_test.iter().map(as_clean).collect();

        let (teacher, _) = train_teacher(&clean_train, &cfg.teacher, &cfg.teacher_train, None)?;
        let (distilled, _) = distill_student(
            &teacher,
            &noisy_train,
            &student_cfg,
            &cfg.student_train,
            None,
        )?;
        let mut independent = Model::new(student_cfg.clone(), cfg.student_train.seed)?;
        train_classifier(&mut independent, &noisy_train, &cfg.student_train, None)?;

        let outcome = FoldOutcome {
            speaker,
            teacher_clean_ua: unweighted_accuracy(&evaluate_model(&teacher, &clean_test)?)?,
            distilled_ua: unweighted_accuracy(&evaluate_model(&distilled, &noisy_test)?)?,
            independent_ua: unweighted_accuracy(&evaluate_model(&independent, &noisy_test)?)?,
        };
        progress(&outcome);
        folds.push(outcome);
    }
    let mean = |f: fn(&FoldOutcome) -> f64| folds.iter().map(f).sum::<f64>() / folds.len() as f64;
    Ok(LosoReport {
        mean_teacher_clean_ua: mean(|f| f.teacher_clean_ua),
        mean_distilled_ua: mean(|f| f.distilled_ua),
        mean_independent_ua: mean(|f| f.independent_ua),
        folds,
    })
}

fn as_clean(e: &Example) -> Example {
    Example {
        samples: e.clean.clone().unwrap_or_else(|| e.samples.clone()),
        clean: None,
        ..e.clone()
    }
}
