//! Deterministic synthetic stand-ins for emotional speech and field noise.
//!
//! Each emotion class is a harmonic stack with its own fundamental
//! (110·2^(k/4) Hz) and amplitude-modulation rate ({2,4,6,8} Hz). Speakers
//! shift the fundamental and spectral tilt. Noise kinds imitate the spectral
//! character of babble, jet cockpit, factory floor, HF radio static and car
//! interior recordings.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{write_wav, Manifest, UtteranceRecord, Waveform};
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

pub const EMOTION_CLASSES: [&str; 4] = ["happy", "angry", "neutral", "sad"];

const AM_RATES_HZ: [f64; 4] = [2.0, 4.0, 6.0, 8.0];
const MAX_HARMONICS: usize = 8;
const BROADBAND_LEVEL: f64 = 0.003;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utt_per_class_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.utt_per_class_per_speaker == 0 || self.sample_rate == 0 || self.n_samples() == 0 {
            return Err(Error::Invalid(
                "corpus counts and duration must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round().max(0.0) as usize
    }
}

/// Per-speaker voice parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerVoice {
    /// Pitch offset in semitones, within ±1.
    pub semitones: f64,
    /// Harmonic amplitude falls as h^-tilt.
    pub tilt: f64,
}

impl SpeakerVoice {
    pub fn draw(corpus_seed: u64, speaker: usize) -> Self {
        let mut rng = seed::stream(corpus_seed, "corpus.speaker", speaker as u64);
        Self {
            semitones: rng.random_range(-1.0..1.0),
            tilt: rng.random_range(0.8..1.4),
        }
    }
}

/// One utterance of class `label` spoken by `voice`; all remaining variation
/// comes from `rng`.
pub fn synthesize_utterance(
    label: usize,
    voice: SpeakerVoice,
    n_samples: usize,
    sample_rate: u32,
    rng: &mut StreamRng,
) -> Result<Waveform> {
    if label >= EMOTION_CLASSES.len() {
        return Err(Error::Invalid(format!("class {label} out of range")));
    }
    let sr = sample_rate as f64;
    let jitter: f64 = rng.random_range(-0.25..0.25);
    let f0 = 110.0 * 2f64.powf(label as f64 / 4.0) * 2f64.powf((voice.semitones + jitter) / 12.0);
    let am_rate = AM_RATES_HZ[label];
    let am_phase: f64 = rng.random_range(0.0..TAU);
    let amplitude: f64 = rng.random_range(0.25..0.4);
    let harmonics: Vec<(f64, f64, f64)> = (1..=MAX_HARMONICS)
        .filter(|&h| h as f64 * f0 < 0.45 * sr)
        .map(|h| {
            let phase: f64 = rng.random_range(0.0..TAU);
            (h as f64 * f0, (h as f64).powf(-voice.tilt), phase)
        })
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a, _)| a).sum();

    let samples = (0..n_samples)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.55 + 0.45 * (TAU * am_rate * t + am_phase).sin();
            let voiced: f64 = harmonics
                .iter()
                .map(|(f, a, p)| a * (TAU * f * t + p).sin())
                .sum();
            let hiss: f64 = rng.sample(StandardNormal);
            amplitude * env * voiced / norm + BROADBAND_LEVEL * hiss
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Writes `n_speakers × 4 × utt_per_class_per_speaker` WAVs under
/// `out_dir/clean/` and returns their manifest (based at `out_dir`, not yet
/// saved). Records are ordered by speaker, then class, then utterance.
pub fn gen_synth_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("clean");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let n = cfg.n_samples();
    let mut manifest = Manifest::new(
        EMOTION_CLASSES.iter().map(|s| s.to_string()).collect(),
        cfg.seed,
        out_dir,
    );
    let mut index = 0u64;
    for s in 0..cfg.n_speakers {
        let voice = SpeakerVoice::draw(cfg.seed, s);
        let speaker = format!("spk{s:02}");
        for (label, class) in EMOTION_CLASSES.iter().enumerate() {
            for u in 0..cfg.utt_per_class_per_speaker {
                let mut rng = seed::stream(cfg.seed, "corpus.utterance", index);
                let wave = synthesize_utterance(label, voice, n, cfg.sample_rate, &mut rng)?;
                let rel = format!("clean/{speaker}_{class}_{u:02}.wav");
                write_wav(&wave, out_dir.join(&rel))?;
                manifest.records.push(UtteranceRecord {
                    path: rel,
                    label,
                    speaker: speaker.clone(),
                    noise_type: None,
                    snr_db: None,
                    clean_path: None,
                });
                index += 1;
            }
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    BabbleLike,
    TonalJet,
    PeriodicFactory,
    HfStatic,
    LowfreqHum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::BabbleLike,
        NoiseKind::TonalJet,
        NoiseKind::PeriodicFactory,
        NoiseKind::HfStatic,
        NoiseKind::LowfreqHum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::BabbleLike => "babble-like",
            NoiseKind::TonalJet => "tonal-jet",
            NoiseKind::PeriodicFactory => "periodic-factory",
            NoiseKind::HfStatic => "hf-static",
            NoiseKind::LowfreqHum => "lowfreq-hum",
        }
    }

    fn stream_index(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown noise kind `{s}`")))
    }
}

/// Synthesizes `n_samples` of the given noise kind, peak-normalized to 0.5.
pub fn synthesize_noise(
    kind: NoiseKind,
    n_samples: usize,
    sample_rate: u32,
    rng: &mut StreamRng,
) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let white = |rng: &mut StreamRng| -> f64 { rng.sample(StandardNormal) };
    let mut x = vec![0.0; n_samples];
    match kind {
        NoiseKind::BabbleLike => {
            for _ in 0..6 {
                let f0: f64 = rng.random_range(90.0..260.0);
                let syllable: f64 = rng.random_range(3.0..6.0);
                let ph: f64 = rng.random_range(0.0..TAU);
                let vib: f64 = rng.random_range(3.0..7.0);
                let mut phase = 0.0;
                for (i, v) in x.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let f = f0 * (1.0 + 0.06 * (TAU * vib * t).sin());
                    phase += TAU * f / sr;
                    let env = (TAU * syllable * t + ph).sin().max(0.0).powi(2);
                    let voiced: f64 = (1..=6).map(|h| (phase * h as f64).sin() / h as f64).sum();
                    *v += env * voiced;
                }
            }
            for v in &mut x {
                *v += 0.05 * white(rng);
            }
        }
        NoiseKind::TonalJet => {
            let tones = [
                rng.random_range(1800.0..2400.0),
                rng.random_range(3600.0..4400.0),
            ];
            let mut lp = 0.0;
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                lp = 0.7 * lp + 0.3 * white(rng);
                *v = lp + 0.8 * (TAU * tones[0] * t).sin() + 0.5 * (TAU * tones[1] * t).sin();
            }
        }
        NoiseKind::PeriodicFactory => {
            let period = (0.25 * sr) as usize;
            let decay = (-1.0 / (0.02 * sr)).exp();
            let mut burst = 0.0;
            let mut pink = 0.0;
            for (i, v) in x.iter_mut().enumerate() {
                if period > 0 && i % period == 0 {
                    burst = 1.0;
                }
                let t = i as f64 / sr;
                pink = 0.95 * pink + 0.05 * white(rng);
                let hum: f64 = (1..=4)
                    .map(|h| (TAU * 50.0 * h as f64 * t).sin() / h as f64)
                    .sum();
                *v = burst * white(rng) + 0.3 * hum + 2.0 * pink;
                burst *= decay;
            }
        }
        NoiseKind::HfStatic => {
            let mut prev = 0.0;
            for v in x.iter_mut() {
                let w = white(rng);
                let crackle = if rng.random_range(0.0..1.0) < 0.002 {
                    8.0 * white(rng)
                } else {
                    0.0
                };
                *v = (w - prev) + crackle;
                prev = w;
            }
        }
        NoiseKind::LowfreqHum => {
            let engine: f64 = rng.random_range(25.0..40.0);
            let mut lp = 0.0;
            for (i, v) in x.iter_mut().enumerate() {
                let t = i as f64 / sr;
                lp = 0.98 * lp + 0.02 * white(rng);
                *v = 4.0 * lp
                    + 0.3 * (TAU * engine * t).sin()
                    + 0.15 * (TAU * 2.0 * engine * t).sin();
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut x {
            *v *= 0.5 / peak;
        }
    }
    Waveform::new(x, sample_rate)
}

/// Writes one `<kind>.wav` per requested kind into `out_dir`.
pub fn gen_noise_bank(
    kinds: &[NoiseKind],
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    if kinds.is_empty() {
        return Ok(Vec::new());
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::Invalid("noise duration must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    kinds
        .iter()
        .map(|&kind| {
            let mut rng = seed::stream(seed, "noise", kind.stream_index());
            let wave = synthesize_noise(kind, n, sample_rate, &mut rng)?;
            let path = out_dir.join(format!("{kind}.wav"));
            write_wav(&wave, &path)?;
            Ok(path)
        })
        .collect()
}
