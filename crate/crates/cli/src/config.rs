//! Flat `key = value` run configuration. Defaults are overridden by the
//! config file, which is overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mlkd::audio::{CorpusConfig, NoiseKind};
use mlkd::distill::{DistillConfig, LayerMap};
use mlkd::model::{ConvLayerSpec, EncoderNorm, ModelConfig, Pooling, PositionalConv};
use mlkd::train::{AdamWConfig, TeacherInput, TrainConfig};

/// Every recognized key, its default and a help line. An empty default
/// for a model or optimizer key means "taken from the `model` preset".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "global seed for every random sub-stream"),
    ("speakers", "10", "synthetic corpus: number of speakers"),
    (
        "per_class",
        "5",
        "synthetic corpus: utterances per class per speaker",
    ),
    ("duration_s", "1.0", "synthetic utterance length in seconds"),
    ("sample_rate", "16000", "sample rate of generated audio"),
    (
        "noise_kinds",
        "all",
        "comma-separated noise kinds to generate, or `all`",
    ),
    (
        "noise_duration_s",
        "4.0",
        "length of each generated noise recording",
    ),
    ("manifest", "", "input manifest"),
    ("noise_dir", "", "directory of noise WAVs"),
    (
        "snrs",
        "0,5,10,15,20",
        "comma-separated SNR levels in dB; `clean` for no noise",
    ),
    ("teacher", "", "teacher checkpoint (distill)"),
    ("checkpoint", "", "model checkpoint to evaluate"),
    (
        "holdout",
        "",
        "comma-separated speakers excluded from training and used alone for evaluation",
    ),
    ("model", "desk", "architecture preset: desk or full"),
    (
        "conv_layers",
        "",
        "encoder layers as channels:kernel:stride, comma-separated",
    ),
    ("conv_bias", "", "encoder convolutions carry a bias"),
    ("encoder_norm", "", "per-channel or layer-norm"),
    ("hidden_dim", "", "transformer width"),
    ("n_blocks", "", "teacher transformer blocks"),
    ("n_heads", "", "attention heads"),
    ("ffn_dim", "", "feed-forward width"),
    ("dropout", "", "dropout probability in each block"),
    ("positional_conv", "", "kernel:groups, or none"),
    ("pooling", "", "mean or last"),
    ("lr", "", "AdamW learning rate"),
    ("beta1", "0.9", "AdamW beta1"),
    ("beta2", "0.999", "AdamW beta2"),
    ("eps", "1e-8", "AdamW epsilon"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("epochs", "", "training epochs"),
    ("batch_size", "8", "utterances per step"),
    ("temperature", "7", "distillation temperature"),
    (
        "alpha",
        "0.7",
        "weight of the KL term; cross-entropy gets 1 - alpha",
    ),
    (
        "layer_map",
        "even",
        "teacher:student block pairs (1-based), `even` or `none`",
    ),
    ("t_squared", "false", "scale the KL term by T squared"),
    ("teacher_input", "noisy", "noisy or clean"),
    ("freeze_encoder", "false", "keep encoder parameters fixed"),
    (
        "max_folds",
        "0",
        "loso: stop after this many folds (0 = all)",
    ),
];

/// Values filled in from the `model` preset when left empty.
fn preset(model: &str) -> Result<Vec<(&'static str, String)>, String> {
    let (cfg, lr, epochs) = match model {
        "desk" => (ModelConfig::desk_teacher(), "0.002", "30"),
        "full" => (ModelConfig::full_teacher(), "5e-5", "200"),
        other => {
            return Err(format!(
                "unknown model preset `{other}` (expected desk or full)"
            ))
        }
    };
    Ok(vec![
        ("conv_layers", format_conv_layers(&cfg.conv_layers)),
        ("conv_bias", cfg.conv_bias.to_string()),
        (
            "encoder_norm",
            match cfg.encoder_norm {
                EncoderNorm::PerChannel => "per-channel".into(),
                EncoderNorm::LayerNorm => "layer-norm".into(),
            },
        ),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("n_blocks", cfg.n_blocks.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("ffn_dim", cfg.ffn_dim.to_string()),
        ("dropout", cfg.dropout.to_string()),
        (
            "positional_conv",
            cfg.positional_conv
                .map_or("none".into(), |p| format!("{}:{}", p.kernel, p.groups)),
        ),
        (
            "pooling",
            match cfg.pooling {
                Pooling::Mean => "mean".into(),
                Pooling::Last => "last".into(),
            },
        ),
        ("lr", lr.into()),
        ("epochs", epochs.into()),
    ])
}

fn format_conv_layers(layers: &[ConvLayerSpec]) -> String {
    layers
        .iter()
        .map(|l| format!("{}:{}:{}", l.out_channels, l.kernel, l.stride))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(k, _, _)| *k)
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// dashes in keys are read as underscores.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Resolves defaults, then `file` entries, then `flags`, then fills
    /// empty model keys from the preset.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self, String> {
        let mut values: BTreeMap<&'static str, String> =
            KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
        for (source, entries) in [("config file", file), ("flags", flags)] {
            for (k, v) in entries {
                let key = known(k).ok_or_else(|| format!("unknown key `{k}` in {source}"))?;
                values.insert(key, v.clone());
            }
        }
        for (k, v) in preset(&values["model"])? {
            let slot = values.get_mut(k).expect("preset keys are known");
            if slot.is_empty() {
                *slot = v;
            }
        }
        Ok(Self { values })
    }

    /// The fully resolved configuration in config-file syntax.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn str(&self, key: &str) -> &str {
        &self.values[known(key).expect("key is declared in KEYS")]
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .parse()
            .map_err(|e| format!("{key} = `{}`: {e}", self.str(key)))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, String> {
        match self.str(key) {
            "" => Err(format!(
                "--{} is required for this command",
                key.replace('_', "-")
            )),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn seed(&self) -> Result<u64, String> {
        self.get("seed")
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn snrs(&self) -> Result<Vec<f64>, String> {
        let levels = self
            .list("snrs")
            .iter()
            .map(|s| match s.as_str() {
                "clean" | "inf" => Ok(f64::INFINITY),
                s => s.parse::<f64>().map_err(|e| format!("snrs: `{s}`: {e}")),
            })
            .collect::<Result<Vec<f64>, String>>()?;
        if levels.is_empty() {
            return Err("snrs: at least one level is required".into());
        }
        Ok(levels)
    }

    pub fn noise_kinds(&self) -> Result<Vec<NoiseKind>, String> {
        if self.str("noise_kinds") == "all" {
            return Ok(NoiseKind::ALL.to_vec());
        }
        self.list("noise_kinds")
            .iter()
            .map(|s| s.parse().map_err(|e: mlkd::Error| e.to_string()))
            .collect()
    }

    pub fn corpus(&self) -> Result<CorpusConfig, String> {
        Ok(CorpusConfig {
            n_speakers: self.get("speakers")?,
            utt_per_class_per_speaker: self.get("per_class")?,
            duration_s: self.get("duration_s")?,
            sample_rate: self.get("sample_rate")?,
            seed: self.seed()?,
        })
    }

    pub fn model(&self, n_classes: usize) -> Result<ModelConfig, String> {
        let conv_layers = self
            .list("conv_layers")
            .iter()
            .map(|l| {
                let parts: Vec<usize> = l
                    .split(':')
                    .map(|p| {
                        p.parse::<usize>()
                            .map_err(|e| format!("conv_layers: `{l}`: {e}"))
                    })
                    .collect::<Result<_, _>>()?;
                match parts[..] {
                    [out_channels, kernel, stride] => Ok(ConvLayerSpec {
                        out_channels,
                        kernel,
                        stride,
                    }),
                    _ => Err(format!("conv_layers: `{l}` is not channels:kernel:stride")),
                }
            })
            .collect::<Result<Vec<_>, String>>()?;
        let encoder_norm = match self.str("encoder_norm") {
            "per-channel" => EncoderNorm::PerChannel,
            "layer-norm" => EncoderNorm::LayerNorm,
            other => {
                return Err(format!(
                    "encoder_norm: `{other}` (expected per-channel or layer-norm)"
                ))
            }
        };
        let pooling = match self.str("pooling") {
            "mean" => Pooling::Mean,
            "last" => Pooling::Last,
            other => return Err(format!("pooling: `{other}` (expected mean or last)")),
        };
        let positional_conv = match self.str("positional_conv") {
            "none" => None,
            s => {
                let (k, g) = s
                    .split_once(':')
                    .ok_or_else(|| format!("positional_conv: `{s}` is not kernel:groups"))?;
                Some(PositionalConv {
                    kernel: k.parse().map_err(|e| format!("positional_conv: {e}"))?,
                    groups: g.parse().map_err(|e| format!("positional_conv: {e}"))?,
                })
            }
        };
        let cfg = ModelConfig {
            conv_layers,
            conv_bias: self.get("conv_bias")?,
            encoder_norm,
            hidden_dim: self.get("hidden_dim")?,
            n_blocks: self.get("n_blocks")?,
            n_heads: self.get("n_heads")?,
            ffn_dim: self.get("ffn_dim")?,
            n_classes,
            dropout: self.get("dropout")?,
            positional_conv,
            pooling,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Training settings for a run whose student has `student_blocks` blocks.
    pub fn train(&self, student_blocks: usize) -> Result<TrainConfig, String> {
        let layer_map = match self.str("layer_map") {
            "even" => LayerMap::even_layers(student_blocks),
            s => LayerMap::parse(s).map_err(|e| e.to_string())?,
        };
        let teacher_input = match self.str("teacher_input") {
            "noisy" => TeacherInput::Noisy,
            "clean" => TeacherInput::Clean,
            other => {
                return Err(format!(
                    "teacher_input: `{other}` (expected noisy or clean)"
                ))
            }
        };
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                lr: self.get("lr")?,
                beta1: self.get("beta1")?,
                beta2: self.get("beta2")?,
                eps: self.get("eps")?,
                weight_decay: self.get("weight_decay")?,
            },
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            seed: self.seed()?,
            distill: DistillConfig {
                temperature: self.get("temperature")?,
                alpha: self.get("alpha")?,
                layer_map,
                t_squared_scaling: self.get("t_squared")?,
            },
            teacher_input,
            freeze_encoder: self.get("freeze_encoder")?,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

pub fn read_file(path: &Path) -> Result<Vec<(String, String)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_file(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let file = parse_file("# comment\nseed = 3\nalpha=0.5\n\nbatch-size = 4\n").unwrap();
        let cfg = RunConfig::resolve(&file, &kv(&[("alpha", "0.9")])).unwrap();
        assert_eq!(cfg.seed().unwrap(), 3);
        assert_eq!(cfg.str("alpha"), "0.9");
        assert_eq!(cfg.str("batch_size"), "4");
        assert_eq!(cfg.str("temperature"), "7");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(&kv(&[("learning_rate", "1")]), &[]).unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(parse_file("just text").is_err());
    }

    #[test]
    fn preset_fills_model_keys_and_explicit_values_win() {
        let cfg = RunConfig::resolve(
            &kv(&[("hidden_dim", "16"), ("n_heads", "2"), ("ffn_dim", "8")]),
            &[],
        )
        .unwrap();
        let m = cfg.model(4).unwrap();
        let desk = ModelConfig::desk_teacher();
        assert_eq!(m.hidden_dim, 16);
        assert_eq!(m.conv_layers, desk.conv_layers);
        assert_eq!(m.n_blocks, desk.n_blocks);

        let full = RunConfig::resolve(&kv(&[("model", "full")]), &[]).unwrap();
        assert_eq!(full.model(4).unwrap(), ModelConfig::full_teacher());
        assert_eq!(full.train(6).unwrap().optimizer.lr, 5e-5);
    }

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let cfg =
            RunConfig::resolve(&kv(&[("snrs", "0,clean")]), &kv(&[("layer_map", "2:1")])).unwrap();
        let again = RunConfig::resolve(&parse_file(&cfg.echo()).unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.snrs().unwrap(), vec![0.0, f64::INFINITY]);
        assert_eq!(again.train(2).unwrap().distill.layer_map.pairs(), &[(2, 1)]);
    }
}
