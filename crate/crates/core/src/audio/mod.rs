//! Audio I/O, SNR-controlled noise contamination and the synthetic corpus
//! used in place of licensed emotion and noise recordings.

mod manifest;
mod mix;
mod synth;
mod wav;

pub use manifest::{Manifest, UtteranceRecord};
pub use mix::{
    assign_contamination, build_noisy_manifest, measured_snr_db, mix_at_snr, Mixture, NoiseSource,
};
pub use synth::{
    gen_noise_bank, gen_synth_corpus, synthesize_noise, synthesize_utterance, CorpusConfig,
    NoiseKind, SpeakerVoice, EMOTION_CLASSES,
};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio. Samples are nominally in [-1, 1]; values outside that range
/// are clamped when written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid(
                "waveform must contain at least one sample".into(),
            ));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("waveform sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
