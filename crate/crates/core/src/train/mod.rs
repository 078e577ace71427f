//! Optimizer and the two training procedures: supervised classifier training
//! (the teacher, on clean audio) and distillation of a half-depth student on
//! noisy audio.

mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, AdamWConfig};

use crate::audio::{read_wav, Manifest};
use crate::distill::{self, DistillConfig, LossBreakdown};
use crate::error::{Error, Result};
use crate::model::{init_student_from_teacher, Model, ModelConfig};
use crate::seed;
use crate::tensor::{Graph, Var};

/// One utterance held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub samples: Vec<f64>,
    /// The uncontaminated version, for noisy records that carry one.
    pub clean: Option<Vec<f64>>,
    pub label: usize,
    pub speaker: String,
    pub sample_rate: u32,
}

/// Decodes every record of `manifest`. With `with_clean`, each record must
/// name its clean source, which is loaded as well.
pub fn load_examples(manifest: &Manifest, with_clean: bool) -> Result<Vec<Example>> {
    manifest.validate()?;
    manifest
        .records
        .iter()
        .map(|r| {
            let clean = if with_clean {
                let rel = r.clean_path.as_ref().ok_or_else(|| {
                    Error::Manifest(format!(
                        "record {} has no clean_path but clean teacher input was requested",
                        r.path
                    ))
                })?;
                Some(read_wav(manifest.resolve(rel))?.into_samples())
            } else {
                None
            };
            let wave = read_wav(manifest.resolve(&r.path))?;
            Ok(Example {
                sample_rate: wave.sample_rate(),
                samples: wave.into_samples(),
                clean,
                label: r.label,
                speaker: r.speaker.clone(),
            })
        })
        .collect()
}

/// Which signal the frozen teacher sees during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherInput {
    /// The same noisy utterance as the student.
    Noisy,
    /// The clean source of the student's noisy utterance.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: DistillConfig,
    pub teacher_input: TeacherInput,
    /// Keep `encoder.*` parameters fixed.
    pub freeze_encoder: bool,
}

impl TrainConfig {
    /// lr 5e-5, batch 8, 30 epochs, T = 7, α = 0.7.
    pub fn desk(student_blocks: usize) -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            epochs: 30,
            batch_size: 8,
            seed: 7,
            distill: DistillConfig::standard(student_blocks),
            teacher_input: TeacherInput::Noisy,
            freeze_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.distill.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval_ua: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line, tagged `"kind": "step"` or `"epoch"`, in the
    /// order they were produced.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
                push_line(&mut out, &LogLine::Step(*s));
            }
            push_line(&mut out, &LogLine::Epoch(*e));
        }
        for s in steps {
            push_line(&mut out, &LogLine::Step(*s));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = Self::default();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            match serde_json::from_str(line)
                .map_err(|e| Error::Invalid(format!("log line {}: {e}", i + 1)))?
            {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Epoch(e) => log.epochs.push(e),
            }
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

fn push_line(out: &mut String, line: &LogLine) {
    out.push_str(&serde_json::to_string(line).expect("log records serialize"));
    out.push('\n');
}

/// Scores a model after each epoch (e.g. held-out UA).
pub type EpochEval<'a> = dyn Fn(&Model) -> Result<f64> + 'a;

enum Objective<'t> {
    CrossEntropy,
    Distill(&'t Model),
}

/// Trains `model` with cross-entropy alone. The log's breakdown has
/// `l_kl = l_mse = 0` and `total = l_ce`.
pub fn train_classifier(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    eval: Option<&EpochEval<'_>>,
) -> Result<TrainLog> {
    run(model, Objective::CrossEntropy, data, cfg, eval)
}

/// Initializes a teacher from `cfg.seed` and trains it on `data`.
pub fn train_teacher(
    data: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: Option<&EpochEval<'_>>,
) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let log = train_classifier(&mut model, data, cfg, eval)?;
    Ok((model, log))
}

/// Builds a student from the teacher's even blocks and trains it on the
/// distillation objective. The teacher is only read.
pub fn distill_student(
    teacher: &Model,
    data: &[Example],
    student_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: Option<&EpochEval<'_>>,
) -> Result<(Model, TrainLog)> {
    let mut student = Model::new(student_cfg.clone(), cfg.seed)?;
    init_student_from_teacher(teacher, &mut student)?;
    let log = continue_distillation(&mut student, teacher, data, cfg, eval)?;
    Ok((student, log))
}

/// Runs the distillation objective on an already initialized student.
pub fn continue_distillation(
    student: &mut Model,
    teacher: &Model,
    data: &[Example],
    cfg: &TrainConfig,
    eval: Option<&EpochEval<'_>>,
) -> Result<TrainLog> {
    cfg.distill
        .layer_map
        .check_depths(teacher.config().n_blocks, student.config().n_blocks)?;
    if teacher.config().hidden_dim != student.config().hidden_dim {
        return Err(Error::Config("teacher and student widths differ".into()));
    }
    run(student, Objective::Distill(teacher), data, cfg, eval)
}

fn run(
    model: &mut Model,
    objective: Objective<'_>,
    data: &[Example],
    cfg: &TrainConfig,
    eval: Option<&EpochEval<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    if let Objective::Distill(_) = objective {
        if cfg.teacher_input == TeacherInput::Clean && data.iter().any(|e| e.clean.is_none()) {
            return Err(Error::Config(
                "clean teacher input requested but examples lack clean audio".into(),
            ));
        }
    }
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::stream(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
            let diverged = |reason: String, last_good: &Model| Error::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(last_good.clone()),
            };
            let (loss, grads) = match batch_gradients(model, &objective, &examples, cfg, step) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(e.to_string(), model)),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(diverged(format!("loss is {}", loss.total), model));
            }
            let grad_norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            let grad_refs: Vec<Option<&crate::tensor::Tensor>> =
                grads.iter().map(Option::as_ref).collect();
            let names = model.names().to_vec();
            if let Err(e) = opt.step(&names, model.values_mut(), &grad_refs) {
                return Err(match e {
                    Error::NonFiniteGradient(_) => diverged(e.to_string(), model),
                    other => other,
                });
            }
            log.steps.push(StepRecord {
                epoch,
                step,
                loss,
                grad_norm,
            });
            loss_sum += loss.total;
            batches += 1;
            step += 1;
        }
        let eval_ua = eval.map(|f| f(model)).transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            eval_ua,
        });
    }
    Ok(log)
}

/// Forward and backward over one batch; returns the loss breakdown and one
/// gradient per parameter (`None` for frozen ones).
fn batch_gradients(
    model: &Model,
    objective: &Objective<'_>,
    batch: &[&Example],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(LossBreakdown, Vec<Option<crate::tensor::Tensor>>)> {
    let mut g = Graph::new();
    let freeze = cfg.freeze_encoder;
    let mut bound = model.bind_where(&mut g, |n| !(freeze && n.starts_with("encoder.")));
    if model.config().dropout > 0.0 {
        bound = bound.with_dropout(seed::stream(cfg.seed, "dropout", step as u64));
    }
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let n_classes = model.config().n_classes;

    let mut logits = Vec::with_capacity(batch.len());
    let mut states: Vec<Vec<Var>> = vec![Vec::new(); model.config().n_blocks];
    for e in batch {
        let out = bound.forward(&mut g, &e.samples)?;
        logits.push(g.reshape(out.logits, &[1, n_classes])?);
        for (layer, h) in states.iter_mut().zip(out.hidden_states) {
            layer.push(h);
        }
    }
    let logits = g.concat_rows(&logits)?;

    let (total, breakdown) = match objective {
        Objective::CrossEntropy => {
            let ce = distill::cross_entropy(&mut g, logits, &labels)?;
            let v = g.value(ce).item()?;
            let breakdown = LossBreakdown {
                l_mse: 0.0,
                l_kl: 0.0,
                l_ce: v,
                total: v,
            };
            (ce, breakdown)
        }
        Objective::Distill(teacher) => {
            let mut tb = teacher.bind(&mut g, false);
            let mut t_logits = Vec::with_capacity(batch.len());
            let mut t_states: Vec<Vec<Var>> = vec![Vec::new(); teacher.config().n_blocks];
            for e in batch {
                let input = match cfg.teacher_input {
                    TeacherInput::Noisy => &e.samples,
                    TeacherInput::Clean => e.clean.as_ref().expect("checked before training"),
                };
                let out = tb.forward(&mut g, input)?;
                t_logits.push(g.reshape(out.logits, &[1, n_classes])?);
                for (layer, h) in t_states.iter_mut().zip(out.hidden_states) {
                    layer.push(h);
                }
            }
            let t_logits = g.concat_rows(&t_logits)?;
            let map = &cfg.distill.layer_map;
            let stack = |g: &mut Graph, layers: &[Vec<Var>], used: &dyn Fn(usize) -> bool| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        if used(i + 1) {
                            g.concat_rows(l)
                        } else {
                            Ok(l[0])
                        }
                    })
                    .collect::<Result<Vec<Var>>>()
            };
            let ts = stack(&mut g, &t_states, &|i| map.pairs().iter().any(|p| p.0 == i))?;
            let ss = stack(&mut g, &states, &|i| map.pairs().iter().any(|p| p.1 == i))?;
            let vars = distill::student_objective(
                &mut g,
                &cfg.distill,
                &ts,
                &ss,
                t_logits,
                logits,
                &labels,
            )?;
            (vars.total, vars.breakdown(&g)?)
        }
    };
    g.backward(total)?;
    let grads = bound.vars().iter().map(|&v| g.grad(v).cloned()).collect();
    Ok((breakdown, grads))
}
