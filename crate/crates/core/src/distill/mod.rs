//! Distillation losses: multi-level hidden-state MSE, temperature-softened KL
//! and the cross-entropy student loss, combined as
//! `total = α·L_KL + (1 − α)·L_CE + L_MSE`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Teacher-block → student-block correspondence, both 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Config(format!(
                    "layer map {pairs:?} is not strictly increasing"
                )));
            }
        }
        if pairs.iter().any(|&(t, s)| t == 0 || s == 0) {
            return Err(Error::Config(format!(
                "layer map {pairs:?} must be 1-based"
            )));
        }
        Ok(Self { pairs })
    }

    /// `(2j, j)` for `j = 1..=student_blocks`.
    pub fn even_layers(student_blocks: usize) -> Self {
        Self {
            pairs: (1..=student_blocks).map(|j| (2 * j, j)).collect(),
        }
    }

    pub fn empty() -> Self {
        Self { pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks every index against the two block counts.
    pub fn check_depths(&self, teacher_blocks: usize, student_blocks: usize) -> Result<()> {
        match self
            .pairs
            .iter()
            .find(|&&(t, s)| t > teacher_blocks || s > student_blocks)
        {
            Some(p) => Err(Error::Config(format!(
                "layer pair {p:?} exceeds teacher/student depth {teacher_blocks}/{student_blocks}"
            ))),
            None => Ok(()),
        }
    }

    /// Parses `"2:1,4:2"`; an empty string is the empty map.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(Self::empty());
        }
        let pairs = text
            .split(',')
            .map(|p| {
                let (t, s) = p.split_once(':').ok_or_else(|| {
                    Error::Config(format!("layer pair `{p}` is not `teacher:student`"))
                })?;
                let num = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad layer index in `{p}`")))
                };
                Ok((num(t)?, num(s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }
}

impl std::fmt::Display for LayerMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.pairs.iter().map(|(t, s)| format!("{t}:{s}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub layer_map: LayerMap,
    /// Multiplies the KL term by T².
    pub t_squared_scaling: bool,
}

impl DistillConfig {
    /// T = 7, α = 0.7 and the even-layer map for a student of the given depth.
    pub fn standard(student_blocks: usize) -> Self {
        Self {
            temperature: 7.0,
            alpha: 0.7,
            layer_map: LayerMap::even_layers(student_blocks),
            t_squared_scaling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Scalar values of each loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_kl: f64,
    pub l_ce: f64,
    pub total: f64,
}

pub fn total_loss(cfg: &DistillConfig, l_kl: f64, l_ce: f64, l_mse: f64) -> LossBreakdown {
    LossBreakdown {
        l_mse,
        l_kl,
        l_ce,
        total: cfg.alpha * l_kl + (1.0 - cfg.alpha) * l_ce + l_mse,
    }
}

/// Mean over mapped pairs of the elementwise mean squared difference.
/// `teacher_states[i]` and `student_states[j]` hold block `i+1` / `j+1`
/// outputs, with the batch stacked along rows.
pub fn multi_level_mse(
    g: &mut Graph,
    teacher_states: &[Var],
    student_states: &[Var],
    map: &LayerMap,
) -> Result<Var> {
    if map.is_empty() {
        return Err(Error::Invalid(
            "multi_level_mse needs at least one layer pair".into(),
        ));
    }
    map.check_depths(teacher_states.len(), student_states.len())?;
    let mut acc: Option<Var> = None;
    for &(t, s) in map.pairs() {
        let (ht, hs) = (teacher_states[t - 1], student_states[s - 1]);
        if g.shape(ht) != g.shape(hs) {
            return Err(Error::shape(
                "multi_level_mse",
                format!(
                    "teacher layer {t} {:?} vs student layer {s} {:?}",
                    g.shape(ht),
                    g.shape(hs)
                ),
            ));
        }
        let d = g.sub(hs, ht)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    g.scale(
        acc.expect("map is non-empty"),
        1.0 / map.pairs().len() as f64,
    )
}

/// `softmax(logits / T)` along the class axis.
pub fn soften(g: &mut Graph, logits: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled = g.scale(logits, 1.0 / temperature)?;
    g.softmax(scaled)
}

/// Mean over rows of `Σ_k p_t·(ln p_t − ln max(p_s, 1e-12))` for `[batch, classes]`
/// (or a single `[classes]` row).
pub fn kl_distill_loss(g: &mut Graph, p_teacher: Var, p_student: Var) -> Result<Var> {
    if g.shape(p_teacher) != g.shape(p_student) {
        return Err(Error::shape(
            "kl_distill_loss",
            format!("{:?} vs {:?}", g.shape(p_teacher), g.shape(p_student)),
        ));
    }
    let rows = batch_rows(g, p_teacher);
    let log_t = g.clamp_log(p_teacher, PROB_FLOOR)?;
    let log_s = g.clamp_log(p_student, PROB_FLOOR)?;
    let diff = g.sub(log_t, log_s)?;
    let terms = g.mul(p_teacher, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / rows as f64)
}

/// Mean over rows of `−ln softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let classes = *shape.last().unwrap_or(&0);
    let rows = batch_rows(g, logits);
    if labels.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for logits {shape:?}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut onehot = vec![0.0; rows * classes];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * classes + y] = 1.0;
    }
    let y = g.constant(Tensor::new(shape, onehot)?);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(y, logp)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / rows as f64)
}

fn batch_rows(g: &Graph, v: Var) -> usize {
    match g.shape(v) {
        [rows, _] => *rows,
        _ => 1,
    }
}

/// Graph nodes of one student step's losses.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_mse: Option<Var>,
    pub l_kl: Var,
    pub l_ce: Var,
    pub total: Var,
}

impl LossVars {
    /// Reads the scalar values back from the graph.
    pub fn breakdown(&self, g: &Graph) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_mse: match self.l_mse {
                Some(v) => g.value(v).item()?,
                None => 0.0,
            },
            l_kl: g.value(self.l_kl).item()?,
            l_ce: g.value(self.l_ce).item()?,
            total: g.value(self.total).item()?,
        })
    }
}

/// Builds the full student objective. Teacher inputs must be constants on `g`.
/// An empty layer map drops the MSE term.
pub fn student_objective(
    g: &mut Graph,
    cfg: &DistillConfig,
    teacher_states: &[Var],
    student_states: &[Var],
    teacher_logits: Var,
    student_logits: Var,
    labels: &[usize],
) -> Result<LossVars> {
    cfg.validate()?;
    let l_mse = if cfg.layer_map.is_empty() {
        None
    } else {
        Some(multi_level_mse(
            g,
            teacher_states,
            student_states,
            &cfg.layer_map,
        )?)
    };
    let p_t = soften(g, teacher_logits, cfg.temperature)?;
    let p_s = soften(g, student_logits, cfg.temperature)?;
    let mut l_kl = kl_distill_loss(g, p_t, p_s)?;
    if cfg.t_squared_scaling {
        l_kl = g.scale(l_kl, cfg.temperature * cfg.temperature)?;
    }
    let l_ce = cross_entropy(g, student_logits, labels)?;

    // Same association order as `total_loss`, so the logged identity is exact.
    let a = g.scale(l_kl, cfg.alpha)?;
    let b = g.scale(l_ce, 1.0 - cfg.alpha)?;
    let mut total = g.add(a, b)?;
    total = match l_mse {
        Some(m) => g.add(total, m)?,
        None => {
            let zero = g.constant(Tensor::scalar(0.0));
            g.add(total, zero)?
        }
    };
    Ok(LossVars {
        l_mse,
        l_kl,
        l_ce,
        total,
    })
}
