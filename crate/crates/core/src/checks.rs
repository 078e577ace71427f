//! Finite-difference gradient checks over every graph primitive and every
//! training loss, on small random inputs.

use rand::Rng;
use serde::Serialize;

use crate::distill::{
    cross_entropy, kl_distill_loss, multi_level_mse, soften, student_objective, DistillConfig,
    LayerMap,
};
use crate::error::Result;
use crate::seed;
use crate::tensor::{grad_check, Conv1dAttrs, Graph, Primitive, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Inputs {
    rng: seed::StreamRng,
}

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| self.rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        self.uniform(shape, -1.5, 1.5)
    }
}

/// Reduces `y` to a scalar through a fixed random weighting, so that every
/// output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut inputs = Inputs {
        rng: seed::stream(salt, "checks.weights", 0),
    };
    let w = g.constant(inputs.normal(&shape));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn primitive_case(p: Primitive, rng: &mut Inputs) -> Case {
    let salt = p as u64;
    macro_rules! case {
        ($inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            (
                $inputs,
                Box::new(move |$g: &mut Graph, $v: &[Var]| {
                    let y = $body?;
                    weighted_sum($g, y, salt)
                }),
            )
        };
    }
    match p {
        Primitive::MatMul => case!(vec![rng.normal(&[3, 4]), rng.normal(&[4, 2])], |g, v| g
            .matmul(v[0], v[1])),
        Primitive::Conv1d => case!(
            vec![
                rng.normal(&[4, 7]),
                rng.normal(&[4, 2, 3]),
                rng.normal(&[4])
            ],
            |g, v| {
                g.conv1d(
                    v[0],
                    v[1],
                    Some(v[2]),
                    Conv1dAttrs {
                        stride: 2,
                        padding: 1,
                        groups: 2,
                    },
                )
            }
        ),
        Primitive::Add => case!(vec![rng.normal(&[3, 4]), rng.normal(&[4])], |g, v| g
            .add(v[0], v[1])),
        Primitive::Sub => case!(vec![rng.normal(&[3, 4]), rng.normal(&[3, 4])], |g, v| g
            .sub(v[0], v[1])),
        Primitive::Mul => case!(vec![rng.normal(&[4, 3]), rng.normal(&[4, 1])], |g, v| g
            .mul(v[0], v[1])),
        Primitive::Scale => case!(vec![rng.normal(&[2, 5])], |g, v| g.scale(v[0], -1.7)),
        Primitive::Gelu => case!(vec![rng.normal(&[3, 4])], |g, v| g.gelu(v[0])),
        Primitive::Softmax => case!(vec![rng.normal(&[3, 4])], |g, v| g.softmax(v[0])),
        Primitive::LogSoftmax => case!(vec![rng.normal(&[3, 4])], |g, v| g.log_softmax(v[0])),
        Primitive::ClampLog => case!(vec![rng.uniform(&[2, 4], 0.2, 2.0)], |g, v| g
            .clamp_log(v[0], 1e-12)),
        Primitive::LayerNorm => case!(vec![rng.normal(&[3, 5])], |g, v| g.layer_norm(v[0], 1e-5)),
        Primitive::GroupNorm => case!(vec![rng.normal(&[4, 5])], |g, v| g
            .group_norm(v[0], 2, 1e-5)),
        Primitive::Sum => case!(vec![rng.normal(&[3, 4])], |g, v| g.sum(v[0])),
        Primitive::Mean => case!(vec![rng.normal(&[3, 4])], |g, v| g.mean(v[0])),
        Primitive::MeanRows => case!(vec![rng.normal(&[5, 3])], |g, v| g.mean_rows(v[0])),
        Primitive::Transpose => case!(vec![rng.normal(&[3, 5])], |g, v| g.transpose(v[0])),
        Primitive::Reshape => case!(vec![rng.normal(&[3, 4])], |g, v| g.reshape(v[0], &[2, 6])),
        Primitive::Narrow => case!(vec![rng.normal(&[4, 6])], |g, v| g.narrow(v[0], 1, 2, 3)),
        Primitive::ConcatRows => case!(vec![rng.normal(&[2, 3]), rng.normal(&[4, 3])], |g, v| g
            .concat_rows(&[v[0], v[1]])),
        Primitive::ScaledDotAttention => case!(
            vec![
                rng.normal(&[5, 4]),
                rng.normal(&[5, 4]),
                rng.normal(&[5, 4])
            ],
            |g, v| g.scaled_dot_attention(v[0], v[1], v[2], 2)
        ),
    }
}

fn line(
    name: &str,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Result<CheckLine> {
    let r = grad_check(f, inputs, STEP)?;
    Ok(CheckLine {
        name: name.into(),
        max_rel_error: r.max_rel_error,
        probes: r.probes,
    })
}

/// One line per primitive (`primitive.<name>`), then `loss.mse`, `loss.kl`,
/// `loss.ce` and `loss.total`.
pub fn gradient_report(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = Inputs {
        rng: seed::stream(seed, "checks.inputs", 0),
    };
    let mut lines = Vec::new();
    for p in Primitive::ALL {
        let (inputs, f) = primitive_case(p, &mut rng);
        lines.push(line(&format!("primitive.{}", p.name()), f, &inputs)?);
    }

    let teacher_states: Vec<Tensor> = (0..4).map(|_| rng.normal(&[3, 4])).collect();
    let teacher_logits = rng.uniform(&[2, 4], -3.0, 3.0);
    let labels = [1usize, 3];
    let map = LayerMap::even_layers(2);

    let ts = teacher_states.clone();
    let m = map.clone();
    lines.push(line(
        "loss.mse",
        move |g, x| {
            let t: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            multi_level_mse(g, &t, x, &m)
        },
        &[rng.normal(&[3, 4]), rng.normal(&[3, 4])],
    )?);

    let tl = teacher_logits.clone();
    lines.push(line(
        "loss.kl",
        move |g, x| {
            let t = g.constant(tl.clone());
            let pt = soften(g, t, 7.0)?;
            let ps = soften(g, x[0], 7.0)?;
            kl_distill_loss(g, pt, ps)
        },
        &[rng.uniform(&[2, 4], -3.0, 3.0)],
    )?);

    lines.push(line(
        "loss.ce",
        move |g, x| cross_entropy(g, x[0], &labels),
        &[rng.uniform(&[2, 4], -3.0, 3.0)],
    )?);

    let cfg = DistillConfig::standard(2);
    lines.push(line(
        "loss.total",
        move |g, x| {
            let ts: Vec<Var> = teacher_states
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect();
            let t = g.constant(teacher_logits.clone());
            Ok(student_objective(g, &cfg, &ts, &x[..2], t, x[2], &labels)?.total)
        },
        &[
            rng.normal(&[3, 4]),
            rng.normal(&[3, 4]),
            rng.uniform(&[2, 4], -3.0, 3.0),
        ],
    )?);
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_and_loss_passes() {
        let lines = gradient_report(11).unwrap();
        assert_eq!(lines.len(), Primitive::ALL.len() + 4);
        for l in &lines {
            assert!(l.passed(), "{l:?}");
            assert!(l.probes > 0);
        }
    }
}
