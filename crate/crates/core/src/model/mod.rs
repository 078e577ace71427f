//! Convolutional feature encoder, transformer context network and classifier
//! head shared by teacher and student.
//!
//! Parameters live in a flat, named list whose order is fixed by
//! [`ModelConfig::layout`]. A forward pass binds them onto a [`Graph`] (as
//! trainable leaves or as constants) and runs one utterance at a time.

mod checkpoint;
mod config;

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{ConvLayerSpec, EncoderNorm, ModelConfig, Pooling, PositionalConv};

use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};
use crate::tensor::{Conv1dAttrs, Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Fan-in scaled uniform weights, zero biases, unit norm gains. Each
    /// parameter draws from its own `init` stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let values = config
            .layout()
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if name.ends_with(".weight") {
                    let fan_in: usize = if shape.len() == 3 {
                        shape[1] * shape[2]
                    } else {
                        shape[0]
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng = seed::stream(seed, "init", i as u64);
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; n]
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(config, values)
    }

    /// Assembles a model from parameter values given in layout order.
    pub fn from_values(config: ModelConfig, values: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != values.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        for ((name, shape), v) in layout.iter().zip(&values) {
            if v.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    v.shape()
                )));
            }
        }
        let names: Vec<String> = layout.into_iter().map(|(n, _)| n).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            values,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Hex SHA-256 over every parameter's name, shape and little-endian bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Places every parameter on `g`, as gradient-tracking leaves when
    /// `trainable`, else as constants.
    pub fn bind<'m>(&'m self, g: &mut Graph, trainable: bool) -> Bound<'m> {
        self.bind_where(g, |_| trainable)
    }

    /// Like [`Model::bind`], choosing per parameter name.
    pub fn bind_where<'m>(&'m self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound<'m> {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| g.leaf(v.clone(), trainable(n)))
            .collect();
        Bound {
            model: self,
            vars,
            dropout_rng: None,
        }
    }

    /// Logits for one waveform, computed on a throwaway graph.
    pub fn predict(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false);
        let out = b.forward(&mut g, samples)?;
        Ok(g.value(out.logits).data().to_vec())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every intermediate a distillation step needs from one utterance.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Encoder output, `[channels, frames]`.
    pub features: Var,
    /// Output of each block, `[frames, hidden_dim]`.
    pub hidden_states: Vec<Var>,
    /// Last hidden state (the projected features when there are no blocks).
    pub z: Var,
    /// `[n_classes]`.
    pub logits: Var,
}

/// A model's parameters placed on one graph.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
    dropout_rng: Option<StreamRng>,
}

impl<'m> Bound<'m> {
    /// Enables dropout (at the configured rate) drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: StreamRng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.model
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn forward(&mut self, g: &mut Graph, samples: &[f64]) -> Result<ForwardOutput> {
        let wave = g.constant(Tensor::new(vec![1, samples.len()], samples.to_vec())?);
        let features = self.feature_encoder(g, wave)?;
        let x = self.project(g, features)?;
        let (hidden_states, z) = self.context(g, x)?;
        let logits = self.classify(g, z)?;
        Ok(ForwardOutput {
            features,
            hidden_states,
            z,
            logits,
        })
    }

    /// `[1, samples] → [channels, frames]`: strided convolutions, each followed
    /// by normalization, a per-channel affine map and GELU.
    pub fn feature_encoder(&mut self, g: &mut Graph, wave: Var) -> Result<Var> {
        let cfg = self.cfg();
        let samples = g.shape(wave).get(1).copied().unwrap_or(0);
        if cfg.frames_for(samples).is_none() {
            return Err(Error::Invalid(format!(
                "input of {samples} samples is shorter than the receptive field ({})",
                cfg.receptive_field()
            )));
        }
        let mut x = wave;
        for (i, l) in cfg.conv_layers.iter().enumerate() {
            let w = self.param(&format!("encoder.{i}.conv.weight"))?;
            let b = if cfg.conv_bias {
                Some(self.param(&format!("encoder.{i}.conv.bias"))?)
            } else {
                None
            };
            let attrs = Conv1dAttrs {
                stride: l.stride,
                ..Default::default()
            };
            x = g.conv1d(x, w, b, attrs)?;
            x = match cfg.encoder_norm {
                EncoderNorm::PerChannel => g.group_norm(x, l.out_channels, NORM_EPS)?,
                EncoderNorm::LayerNorm => {
                    let t = g.transpose(x)?;
                    let n = g.layer_norm(t, NORM_EPS)?;
                    g.transpose(n)?
                }
            };
            x = self.affine(g, x, &format!("encoder.{i}.norm"))?;
            x = g.gelu(x)?;
        }
        Ok(x)
    }

    /// `[channels, frames] → [frames, hidden_dim]`: layer norm over channels
    /// then a linear map, plus the positional convolution when configured.
    pub fn project(&mut self, g: &mut Graph, features: Var) -> Result<Var> {
        let t = g.transpose(features)?;
        let n = g.layer_norm(t, NORM_EPS)?;
        let n = self.affine(g, n, "proj.norm")?;
        let x = self.linear(g, n, "proj")?;
        let Some(pc) = self.cfg().positional_conv else {
            return Ok(x);
        };
        let frames = g.shape(x)[0];
        let xt = g.transpose(x)?;
        let w = self.param("pos_conv.weight")?;
        let b = self.param("pos_conv.bias")?;
        let attrs = Conv1dAttrs {
            stride: 1,
            padding: pc.kernel / 2,
            groups: pc.groups,
        };
        let p = g.conv1d(xt, w, Some(b), attrs)?;
        let p = g.narrow(p, 1, 0, frames)?;
        let p = g.gelu(p)?;
        let p = g.transpose(p)?;
        g.add(x, p)
    }

    /// Runs the block stack; returns each block's output and the last one.
    pub fn context(&mut self, g: &mut Graph, x: Var) -> Result<(Vec<Var>, Var)> {
        let mut states = Vec::with_capacity(self.cfg().n_blocks);
        let mut h = x;
        for j in 0..self.cfg().n_blocks {
            h = self.block(g, h, j)?;
            states.push(h);
        }
        Ok((states, h))
    }

    fn block(&mut self, g: &mut Graph, x: Var, j: usize) -> Result<Var> {
        let heads = self.cfg().n_heads;
        let p = |s: &str| format!("blocks.{j}.{s}");

        let a = g.layer_norm(x, NORM_EPS)?;
        let a = self.affine(g, a, &p("ln1"))?;
        let q = self.linear(g, a, &p("attn.wq"))?;
        let k = self.linear(g, a, &p("attn.wk"))?;
        let v = self.linear(g, a, &p("attn.wv"))?;
        let att = g.scaled_dot_attention(q, k, v, heads)?;
        let o = self.linear(g, att, &p("attn.wo"))?;
        let o = self.dropout(g, o)?;
        let x = g.add(x, o)?;

        let f = g.layer_norm(x, NORM_EPS)?;
        let f = self.affine(g, f, &p("ln2"))?;
        let f = self.linear(g, f, &p("ffn.w1"))?;
        let f = g.gelu(f)?;
        let f = self.linear(g, f, &p("ffn.w2"))?;
        let f = self.dropout(g, f)?;
        g.add(x, f)
    }

    /// Pools `[frames, hidden_dim]` over time and maps it to `[n_classes]`.
    pub fn classify(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        let d = self.cfg().hidden_dim;
        let pooled = match self.cfg().pooling {
            Pooling::Mean => g.mean_rows(z)?,
            Pooling::Last => {
                let frames = g.shape(z)[0];
                g.narrow(z, 0, frames.saturating_sub(1), 1)?
            }
        };
        let row = g.reshape(pooled, &[1, d])?;
        let logits = self.linear(g, row, "head")?;
        g.reshape(logits, &[self.cfg().n_classes])
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn affine(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let y = g.mul(x, gamma)?;
        g.add(y, beta)
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.cfg().dropout;
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// Copies teacher block `2j` (1-based) into student block `j` and every
/// non-block parameter by name.
pub fn init_student_from_teacher(teacher: &Model, student: &mut Model) -> Result<()> {
    let (tc, sc) = (teacher.config(), student.config());
    if tc.n_blocks != 2 * sc.n_blocks || *sc != tc.half_depth() {
        return Err(Error::Config(format!(
            "student ({} blocks) is not a half-depth copy of the teacher ({} blocks) architecture",
            sc.n_blocks, tc.n_blocks
        )));
    }
    for i in 0..student.names.len() {
        let source = match student.names[i].strip_prefix("blocks.") {
            Some(rest) => {
                let (j, tail) = rest
                    .split_once('.')
                    .expect("block parameter names have a suffix");
                let j: usize = j.parse().expect("block index is numeric");
                format!("blocks.{}.{tail}", 2 * j + 1)
            }
            None => student.names[i].clone(),
        };
        let value = teacher
            .param(&source)
            .ok_or_else(|| Error::Config(format!("teacher has no parameter {source}")))?;
        student.values[i] = value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests;
