use super::*;
use crate::model::checkpoint::{decode, encode};

fn tiny() -> ModelConfig {
    ModelConfig {
        conv_layers: vec![
            ConvLayerSpec {
                out_channels: 4,
                kernel: 4,
                stride: 2,
            },
            ConvLayerSpec {
                out_channels: 6,
                kernel: 3,
                stride: 2,
            },
        ],
        conv_bias: true,
        encoder_norm: EncoderNorm::PerChannel,
        hidden_dim: 8,
        n_blocks: 4,
        n_heads: 2,
        ffn_dim: 12,
        n_classes: 3,
        dropout: 0.0,
        positional_conv: None,
        pooling: Pooling::Mean,
    }
}

fn signal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::stream(seed, "test.signal", 0);
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn values_of(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn desk_frame_count_follows_the_conv_length_formula() {
    let cfg = ModelConfig::desk_teacher();
    let mut t = 16000usize;
    for (k, s) in [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)] {
        t = (t - k) / s + 1;
    }
    assert_eq!(t, 49);
    assert_eq!(cfg.frames_for(16000), Some(49));
    assert_eq!(cfg.receptive_field(), 400);
    assert_eq!(cfg.frames_for(400), Some(1));
    assert_eq!(cfg.frames_for(399), None);

    let m = Model::new(cfg, 1).unwrap();
    let mut g = Graph::new();
    let mut b = m.bind(&mut g, false);
    let out = b.forward(&mut g, &signal(16000, 1)).unwrap();
    assert_eq!(g.shape(out.features), &[32, 49]);
    assert_eq!(g.shape(out.z), &[49, 32]);
    assert_eq!(g.shape(out.logits), &[4]);
}

#[test]
fn short_input_is_rejected() {
    let m = Model::new(ModelConfig::desk_teacher(), 1).unwrap();
    let err = m.predict(&[0.1; 399]).unwrap_err().to_string();
    assert!(err.contains("receptive field"), "{err}");
}

#[test]
fn zero_waveform_gives_zero_features() {
    let m = Model::new(tiny(), 3).unwrap();
    let mut g = Graph::new();
    let mut b = m.bind(&mut g, false);
    let out = b.forward(&mut g, &[0.0; 64]).unwrap();
    assert!(values_of(&g, out.features).iter().all(|&x| x == 0.0));
}

#[test]
fn hidden_states_end_with_z_and_logits_have_class_count() {
    let m = Model::new(tiny(), 3).unwrap();
    let mut g = Graph::new();
    let mut b = m.bind(&mut g, false);
    let out = b.forward(&mut g, &signal(64, 2)).unwrap();
    assert_eq!(out.hidden_states.len(), 4);
    assert_eq!(
        values_of(&g, *out.hidden_states.last().unwrap()),
        values_of(&g, out.z)
    );
    assert_eq!(g.shape(out.logits), &[3]);
    for &h in &out.hidden_states {
        assert_eq!(g.shape(h), g.shape(out.z));
    }
}

#[test]
fn context_is_permutation_equivariant_without_positional_conv() {
    let m = Model::new(tiny(), 5).unwrap();
    let frames = 5;
    let x: Vec<f64> = signal(frames * 8, 9);
    let perm = [3, 0, 4, 1, 2];
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(&x[p * 8..(p + 1) * 8]);
    }
    let run = |data: Vec<f64>| {
        let mut g = Graph::new();
        let mut b = m.bind(&mut g, false);
        let xv = g.constant(Tensor::new(vec![frames, 8], data).unwrap());
        let (_, z) = b.context(&mut g, xv).unwrap();
        values_of(&g, z)
    };
    let z = run(x);
    let pz = run(px);
    for (row, &p) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((pz[row * 8 + c] - z[p * 8 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_residual_branches_pass_the_input_through() {
    let mut m = Model::new(tiny(), 5).unwrap();
    for j in 0..4 {
        for name in [
            "attn.wo.weight",
            "attn.wo.bias",
            "ffn.w2.weight",
            "ffn.w2.bias",
        ] {
            m.param_mut(&format!("blocks.{j}.{name}"))
                .unwrap()
                .data_mut()
                .fill(0.0);
        }
    }
    let mut g = Graph::new();
    let mut b = m.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(vec![3, 8]));
    let (states, _) = b.context(&mut g, x).unwrap();
    for h in states {
        assert!(values_of(&g, h).iter().all(|&v| v == 0.0));
    }
    let x = g.constant(Tensor::new(vec![2, 8], signal(16, 4)).unwrap());
    let (states, _) = b.context(&mut g, x).unwrap();
    for h in states {
        assert_eq!(values_of(&g, h), values_of(&g, x));
    }
}

#[test]
fn classify_pooling_contracts() {
    let m = Model::new(tiny(), 6).unwrap();
    let mut g = Graph::new();
    let mut b = m.bind(&mut g, false);
    let zero = g.constant(Tensor::zeros(vec![4, 8]));
    let logits = b.classify(&mut g, zero).unwrap();
    assert!(values_of(&g, logits).iter().all(|&v| v == 0.0));

    // One frame: pooling is the identity, so logits are the affine map of it.
    let row = signal(8, 7);
    let z1 = g.constant(Tensor::new(vec![1, 8], row.clone()).unwrap());
    let l1 = b.classify(&mut g, z1).unwrap();
    let l1 = values_of(&g, l1);
    let w = m.param("head.weight").unwrap().data();
    for k in 0..3 {
        let direct: f64 = (0..8).map(|d| row[d] * w[d * 3 + k]).sum();
        assert!((l1[k] - direct).abs() < 1e-12);
    }

    // Duplicating every frame leaves the mean, hence the logits, unchanged.
    let frames = signal(24, 8);
    let mut doubled = Vec::new();
    for f in frames.chunks(8) {
        doubled.extend_from_slice(f);
        doubled.extend_from_slice(f);
    }
    let z3 = g.constant(Tensor::new(vec![3, 8], frames).unwrap());
    let z6 = g.constant(Tensor::new(vec![6, 8], doubled).unwrap());
    let a = b.classify(&mut g, z3).unwrap();
    let c = b.classify(&mut g, z6).unwrap();
    let (a, c) = (values_of(&g, a), values_of(&g, c));
    for (x, y) in a.iter().zip(&c) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn variants_run() {
    for cfg in [
        ModelConfig {
            encoder_norm: EncoderNorm::LayerNorm,
            ..tiny()
        },
        ModelConfig {
            pooling: Pooling::Last,
            ..tiny()
        },
        ModelConfig {
            positional_conv: Some(PositionalConv {
                kernel: 4,
                groups: 2,
            }),
            ..tiny()
        },
        ModelConfig {
            n_blocks: 0,
            ..tiny()
        },
    ] {
        let m = Model::new(cfg, 2).unwrap();
        let logits = m.predict(&signal(70, 3)).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn dropout_only_applies_with_an_rng() {
    let m = Model::new(
        ModelConfig {
            dropout: 0.5,
            ..tiny()
        },
        2,
    )
    .unwrap();
    let x = signal(64, 3);
    let plain = m.predict(&x).unwrap();
    let mut g = Graph::new();
    let mut b = m
        .bind(&mut g, false)
        .with_dropout(seed::stream(1, "dropout", 0));
    let out = b.forward(&mut g, &x).unwrap();
    assert_ne!(values_of(&g, out.logits), plain);
    assert_eq!(m.predict(&x).unwrap(), plain);
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    let m = Model::new(
        ModelConfig {
            positional_conv: Some(PositionalConv {
                kernel: 4,
                groups: 2,
            }),
            ..tiny()
        },
        11,
    )
    .unwrap();
    let mut g = Graph::new();
    let mut b = m.bind(&mut g, true);
    let out = b.forward(&mut g, &signal(64, 5)).unwrap();
    let sq = g.mul(out.logits, out.logits).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    for (name, &v) in m.names().iter().zip(b.vars()) {
        let grad = g
            .grad(v)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.is_finite(), "{name}");
    }
}

#[test]
fn init_is_seeded() {
    let a = Model::new(tiny(), 1).unwrap();
    assert_eq!(a, Model::new(tiny(), 1).unwrap());
    assert_ne!(a.param_hash(), Model::new(tiny(), 2).unwrap().param_hash());
    assert!(a
        .param("encoder.0.conv.bias")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(a
        .param("blocks.0.ln1.gamma")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    let w = a.param("blocks.0.attn.wq.weight").unwrap();
    let bound = 1.0 / 8f64.sqrt();
    assert!(w.data().iter().all(|v| v.abs() < bound));
}

#[test]
fn student_blocks_copy_even_teacher_blocks() {
    let teacher = Model::new(tiny(), 1).unwrap();
    let mut student = Model::new(tiny().half_depth(), 2).unwrap();
    init_student_from_teacher(&teacher, &mut student).unwrap();
    for name in student.names() {
        let source = match name.strip_prefix("blocks.0.") {
            Some(t) => format!("blocks.1.{t}"),
            None => match name.strip_prefix("blocks.1.") {
                Some(t) => format!("blocks.3.{t}"),
                None => name.clone(),
            },
        };
        assert_eq!(student.param(name), teacher.param(&source), "{name}");
    }
    let before = student.clone();
    init_student_from_teacher(&teacher, &mut student).unwrap();
    assert_eq!(before, student);
}

#[test]
fn incompatible_student_is_rejected() {
    let teacher = Model::new(tiny(), 1).unwrap();
    let mut wrong_depth = Model::new(
        ModelConfig {
            n_blocks: 3,
            ..tiny()
        },
        1,
    )
    .unwrap();
    assert!(init_student_from_teacher(&teacher, &mut wrong_depth).is_err());
    let mut wrong_width = Model::new(
        ModelConfig {
            ffn_dim: 10,
            ..tiny().half_depth()
        },
        1,
    )
    .unwrap();
    assert!(init_student_from_teacher(&teacher, &mut wrong_width).is_err());
}

/// Closed-form count for a block of width `d` and FFN width `f`.
fn block_formula(d: usize, f: usize) -> usize {
    4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
}

#[test]
fn param_count_matches_closed_form() {
    let cfg = tiny();
    let encoder = (4 * 4 + 4 + 2 * 4) + (6 * 4 * 3 + 6 + 2 * 6);
    let proj = 2 * 6 + 6 * 8 + 8;
    let head = 8 * 3 + 3;
    let blocks = 4 * block_formula(8, 12);
    assert_eq!(cfg.param_count(), encoder + proj + blocks + head);
    assert_eq!(cfg.block_param_count(), blocks);
    assert_eq!(
        Model::new(cfg.clone(), 0).unwrap().param_count(),
        cfg.param_count()
    );
    let empty = ModelConfig { n_blocks: 0, ..cfg };
    assert_eq!(empty.param_count(), encoder + proj + head);
}

#[test]
fn full_config_ratio_is_close_to_the_reported_sizes() {
    let t = ModelConfig::full_teacher();
    let s = ModelConfig::full_student();
    assert_eq!(t.block_param_count(), 12 * block_formula(768, 3072));
    assert_eq!(2 * s.block_param_count(), t.block_param_count());
    let ratio = s.param_count() as f64 / t.param_count() as f64;
    assert!((ratio - 197.91 / 360.17).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = Model::new(
        ModelConfig {
            positional_conv: Some(PositionalConv {
                kernel: 4,
                groups: 2,
            }),
            ..tiny()
        },
        4,
    )
    .unwrap();
    let back = decode(&encode(&m).unwrap()).unwrap();
    assert_eq!(back, m);
    let x = signal(80, 1);
    let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let m = Model::new(tiny(), 4).unwrap();
    let bytes = encode(&m).unwrap();

    let err = decode(&bytes[..bytes.len() - 100]).unwrap_err().to_string();
    assert!(err.contains("corrupt"), "{err}");
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(decode(&flipped)
        .unwrap_err()
        .to_string()
        .contains("corrupt"));
    assert!(decode(b"not a checkpoint at all, just text padding it out").is_err());

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&2u32.to_le_bytes());
    let err = decode(&future).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn load_with_wrong_declared_config_fails() {
    let dir = std::env::temp_dir().join(format!("mlkd-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.ckpt");
    let m = Model::new(tiny(), 4).unwrap();
    save_checkpoint(&m, &path).unwrap();
    assert_eq!(load_checkpoint_expecting(&path, &tiny()).unwrap(), m);
    let err = load_checkpoint_expecting(&path, &tiny().half_depth()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
}
