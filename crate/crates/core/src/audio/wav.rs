use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const PCM16_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono RIFF/WAVE file. Samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let fail = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::io(path, io)
        }
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            fail("truncated header".into())
        }
        hound::Error::FormatError(msg) => fail(format!("not a RIFF/WAVE file: {msg}")),
        other => fail(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fail(format!(
            "expected 1 channel, found {} (no implicit downmix)",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fail(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let declared = reader.len() as usize;
    let mut samples = Vec::with_capacity(declared);
    for s in reader.into_samples::<i16>() {
        let s = s.map_err(|e| fail(format!("truncated data chunk: {e}")))?;
        samples.push(f64::from(s) / PCM16_SCALE);
    }
    if samples.len() != declared {
        return Err(fail(format!(
            "truncated data chunk: header declares {declared} samples, read {}",
            samples.len()
        )));
    }
    Waveform::new(samples, spec.sample_rate).map_err(|e| fail(e.to_string()))
}

/// Writes a 16-bit PCM mono file. Returns how many samples were outside
/// [-1, 1] and had to be clamped.
pub fn write_wav(wave: &Waveform, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    let mut clipped = 0;
    for &s in wave.samples() {
        if !(-1.0..=1.0).contains(&s) {
            clipped += 1;
        }
        writer.write_sample(quantize(s)).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)?;
    Ok(clipped)
}

fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * PCM16_SCALE)
        .round()
        .clamp(-32768.0, 32767.0) as i16
}
