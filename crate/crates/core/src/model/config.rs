use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// How each encoder layer's channels are normalized before GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderNorm {
    /// Each channel normalized over time.
    PerChannel,
    /// Each frame normalized over channels.
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Last,
}

/// Grouped convolution over time added to the projected features before the
/// first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalConv {
    pub kernel: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_layers: Vec<ConvLayerSpec>,
    pub conv_bias: bool,
    pub encoder_norm: EncoderNorm,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub positional_conv: Option<PositionalConv>,
    pub pooling: Pooling,
}

const CONV_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
const CONV_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

fn conv_stack(channels: usize) -> Vec<ConvLayerSpec> {
    CONV_KERNELS
        .iter()
        .zip(CONV_STRIDES)
        .map(|(&kernel, stride)| ConvLayerSpec {
            out_channels: channels,
            kernel,
            stride,
        })
        .collect()
}

impl ModelConfig {
    /// Small teacher for CPU experiments: 32 channels and width, 4 blocks.
    pub fn desk_teacher() -> Self {
        Self {
            conv_layers: conv_stack(32),
            conv_bias: true,
            encoder_norm: EncoderNorm::PerChannel,
            hidden_dim: 32,
            n_blocks: 4,
            n_heads: 4,
            ffn_dim: 64,
            n_classes: 4,
            dropout: 0.0,
            positional_conv: None,
            pooling: Pooling::Mean,
        }
    }

    pub fn desk_student() -> Self {
        Self::desk_teacher().half_depth()
    }

    /// Full-size teacher: 512-channel encoder, 768 wide, 12 blocks of 12 heads.
    pub fn full_teacher() -> Self {
        Self {
            conv_layers: conv_stack(512),
            conv_bias: false,
            encoder_norm: EncoderNorm::PerChannel,
            hidden_dim: 768,
            n_blocks: 12,
            n_heads: 12,
            ffn_dim: 3072,
            n_classes: 4,
            dropout: 0.1,
            positional_conv: Some(PositionalConv {
                kernel: 128,
                groups: 16,
            }),
            pooling: Pooling::Mean,
        }
    }

    pub fn full_student() -> Self {
        Self::full_teacher().half_depth()
    }

    /// The same architecture with half as many blocks.
    pub fn half_depth(&self) -> Self {
        Self {
            n_blocks: self.n_blocks / 2,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.conv_layers.is_empty() {
            return fail("conv_layers is empty".into());
        }
        if let Some(l) = self
            .conv_layers
            .iter()
            .find(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return fail(format!("conv layer {l:?} has a zero extent"));
        }
        if self.hidden_dim == 0 || self.ffn_dim == 0 || self.n_heads == 0 {
            return fail("hidden_dim, ffn_dim and n_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return fail(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if let Some(p) = self.positional_conv {
            if p.kernel == 0 || p.groups == 0 || !self.hidden_dim.is_multiple_of(p.groups) {
                return fail(format!(
                    "positional conv {p:?} incompatible with hidden_dim {}",
                    self.hidden_dim
                ));
            }
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> usize {
        self.conv_layers.last().map_or(1, |l| l.out_channels)
    }

    /// Shortest input (in samples) that yields at least one encoder frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_layers
            .iter()
            .rev()
            .fold(1, |r, l| (r - 1) * l.stride + l.kernel)
    }

    /// Encoder frames produced from `samples` inputs, or `None` if the input is
    /// shorter than the receptive field.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.conv_layers.iter().try_fold(samples, |t, l| {
            (t >= l.kernel).then(|| (t - l.kernel) / l.stride + 1)
        })
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, l) in self.conv_layers.iter().enumerate() {
            let c = l.out_channels;
            out.push((format!("encoder.{i}.conv.weight"), vec![c, c_in, l.kernel]));
            if self.conv_bias {
                out.push((format!("encoder.{i}.conv.bias"), vec![c]));
            }
            out.push((format!("encoder.{i}.norm.gamma"), vec![c, 1]));
            out.push((format!("encoder.{i}.norm.beta"), vec![c, 1]));
            c_in = c;
        }
        let (c, d, f) = (c_in, self.hidden_dim, self.ffn_dim);
        out.push(("proj.norm.gamma".into(), vec![c]));
        out.push(("proj.norm.beta".into(), vec![c]));
        out.push(("proj.weight".into(), vec![c, d]));
        out.push(("proj.bias".into(), vec![d]));
        if let Some(p) = self.positional_conv {
            out.push(("pos_conv.weight".into(), vec![d, d / p.groups, p.kernel]));
            out.push(("pos_conv.bias".into(), vec![d]));
        }
        for j in 0..self.n_blocks {
            out.extend(block_layout(j, d, f));
        }
        out.push(("head.weight".into(), vec![d, self.n_classes]));
        out.push(("head.bias".into(), vec![self.n_classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        numel(self.layout().iter().map(|(_, s)| s))
    }

    /// Parameters in the transformer blocks alone.
    pub fn block_param_count(&self) -> usize {
        let layout = self.layout();
        numel(
            layout
                .iter()
                .filter(|(n, _)| n.starts_with("blocks."))
                .map(|(_, s)| s),
        )
    }
}

fn numel<'a>(shapes: impl Iterator<Item = &'a Vec<usize>>) -> usize {
    shapes.map(|s| s.iter().product::<usize>()).sum()
}

fn block_layout(j: usize, d: usize, f: usize) -> Vec<(String, Vec<usize>)> {
    let p = |s: &str| format!("blocks.{j}.{s}");
    let mut out = vec![(p("ln1.gamma"), vec![d]), (p("ln1.beta"), vec![d])];
    for m in ["wq", "wk", "wv", "wo"] {
        out.push((p(&format!("attn.{m}.weight")), vec![d, d]));
        out.push((p(&format!("attn.{m}.bias")), vec![d]));
    }
    out.extend([
        (p("ln2.gamma"), vec![d]),
        (p("ln2.beta"), vec![d]),
        (p("ffn.w1.weight"), vec![d, f]),
        (p("ffn.w1.bias"), vec![f]),
        (p("ffn.w2.weight"), vec![f, d]),
        (p("ffn.w2.bias"), vec![d]),
    ]);
    out
}
