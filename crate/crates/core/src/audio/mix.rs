use std::fs;
use std::path::Path;

use rand::Rng;

use super::{mean_square, read_wav, write_wav, Manifest, UtteranceRecord, Waveform};
use crate::error::{Error, Result};
use crate::seed;

const SILENCE_POWER: f64 = 1e-12;
const SEGMENT_DRAWS: usize = 8;

/// Result of contaminating one utterance.
#[derive(Debug, Clone)]
pub struct Mixture {
    /// `clean + scaled_noise`, clamped to [-1, 1].
    pub noisy: Waveform,
    /// The noise component actually added (before clamping).
    pub scaled_noise: Vec<f64>,
    pub gain: f64,
    /// Start of the noise segment within the noise recording.
    pub offset: usize,
    /// Samples of the sum that fell outside [-1, 1].
    pub clipped: usize,
}

/// Named noise recording.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub name: String,
    pub wave: Waveform,
}

impl NoiseSource {
    /// Loads every `*.wav` in `dir`, sorted by file name; the stem is the name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<NoiseSource>> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(NoiseSource {
                    name,
                    wave: read_wav(&p)?,
                })
            })
            .collect()
    }
}

/// SNR in dB between a signal and a noise component, from full-utterance
/// mean-square power.
pub fn measured_snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_square(signal) / mean_square(noise)).log10()
}

/// Adds a randomly placed noise segment to `clean`, scaled so the SNR over
/// the whole utterance equals `snr_db`. Noise shorter than the utterance is
/// tiled. `snr_db = +inf` returns the clean signal unchanged.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<Mixture> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::Invalid(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Invalid(format!("invalid SNR {snr_db} dB")));
    }
    let p_clean = clean.power();
    if p_clean <= SILENCE_POWER {
        return Err(Error::Invalid(format!(
            "clean signal is silent (power {p_clean:e})"
        )));
    }
    let n = clean.len();
    let mut found = None;
    for _ in 0..SEGMENT_DRAWS {
        let offset = if noise.len() >= n {
            rng.random_range(0..=noise.len() - n)
        } else {
            rng.random_range(0..noise.len())
        };
        let segment: Vec<f64> = (0..n)
            .map(|i| noise.samples()[(offset + i) % noise.len()])
            .collect();
        let p_seg = mean_square(&segment);
        if p_seg > SILENCE_POWER {
            found = Some((offset, segment, p_seg));
            break;
        }
    }
    let (offset, segment, p_seg) = found.ok_or_else(|| {
        Error::Invalid(format!("noise segment silent after {SEGMENT_DRAWS} draws"))
    })?;

    let gain = if snr_db == f64::INFINITY {
        0.0
    } else {
        (p_clean / (p_seg * 10f64.powf(snr_db / 10.0))).sqrt()
    };
    let scaled_noise: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let mut clipped = 0;
    let noisy: Vec<f64> = clean
        .samples()
        .iter()
        .zip(&scaled_noise)
        .map(|(c, z)| {
            let s = c + z;
            if !(-1.0..=1.0).contains(&s) {
                clipped += 1;
            }
            s.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(Mixture {
        noisy: Waveform::new(noisy, clean.sample_rate())?,
        scaled_noise,
        gain,
        offset,
        clipped,
    })
}

fn draw_assignment(rng: &mut impl Rng, n_noises: usize, snr_levels: &[f64]) -> (usize, f64) {
    let noise = rng.random_range(0..n_noises);
    let snr = snr_levels[rng.random_range(0..snr_levels.len())];
    (noise, snr)
}

/// The (noise index, SNR) drawn for each of `n_records` records; identical to
/// the assignment made by [`build_noisy_manifest`] with the same seed.
pub fn assign_contamination(
    n_records: usize,
    n_noises: usize,
    snr_levels: &[f64],
    seed: u64,
) -> Vec<(usize, f64)> {
    (0..n_records)
        .map(|i| {
            draw_assignment(
                &mut seed::stream(seed, "mix", i as u64),
                n_noises,
                snr_levels,
            )
        })
        .collect()
}

/// Contaminates every record of `clean` with one uniformly drawn noise and
/// SNR level, writing WAVs under `out_dir/noisy/`. The returned manifest is
/// based at `out_dir` and preserves record order.
pub fn build_noisy_manifest(
    clean: &Manifest,
    noises: &[NoiseSource],
    snr_levels: &[f64],
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if snr_levels.is_empty() {
        return Err(Error::Invalid("at least one SNR level is required".into()));
    }
    if noises.is_empty() {
        return Err(Error::Invalid(
            "at least one noise source is required".into(),
        ));
    }
    let wav_dir = out_dir.join("noisy");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let out_abs = out_dir.canonicalize().map_err(|e| Error::io(out_dir, e))?;

    let mut out = Manifest::new(clean.class_names.clone(), seed, out_dir);
    for (i, rec) in clean.records.iter().enumerate() {
        let src = clean.resolve(&rec.path);
        let wave = read_wav(&src)?;
        let mut rng = seed::stream(seed, "mix", i as u64);
        let (noise_idx, snr) = draw_assignment(&mut rng, noises.len(), snr_levels);
        let noise = &noises[noise_idx];
        let mix = mix_at_snr(&wave, &noise.wave, snr, &mut rng)?;

        let stem = Path::new(&rec.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("utt{i}"));
        let rel = format!("noisy/{i:05}_{stem}.wav");
        write_wav(&mix.noisy, out_dir.join(&rel))?;

        let src_abs = src.canonicalize().map_err(|e| Error::io(&src, e))?;
        let clean_rel = pathdiff::diff_paths(&src_abs, &out_abs).unwrap_or(src_abs);
        out.records.push(UtteranceRecord {
            path: rel,
            label: rec.label,
            speaker: rec.speaker.clone(),
            noise_type: Some(noise.name.clone()),
            snr_db: Some(snr),
            clean_path: Some(clean_rel.to_string_lossy().into_owned()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::StreamRng;
    use rand::SeedableRng;

    fn tone(n: usize, freq: f64, amp: f64) -> Waveform {
        Waveform::new(
            (0..n).map(|i| amp * (i as f64 * freq).sin()).collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn gain_is_one_at_zero_db_with_equal_power() {
        // Constant-magnitude signals have the same power over every segment.
        let clean = Waveform::new(vec![0.3; 200], 16000).unwrap();
        let noise = Waveform::new(
            (0..1000)
                .map(|i| if i % 2 == 0 { 0.3 } else { -0.3 })
                .collect(),
            16000,
        )
        .unwrap();
        let mut rng = StreamRng::seed_from_u64(1);
        let m = mix_at_snr(&clean, &noise, 0.0, &mut rng).unwrap();
        assert!((m.gain - 1.0).abs() < 1e-12);
        let m = mix_at_snr(&clean, &noise, 20.0, &mut rng).unwrap();
        assert!((m.gain - 0.1).abs() < 1e-12);
    }

    #[test]
    fn measured_snr_hits_target() {
        let clean = tone(4000, 0.05, 0.4);
        let noise = tone(9000, 0.71, 0.2);
        let mut rng = StreamRng::seed_from_u64(3);
        for snr in [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 33.3] {
            let m = mix_at_snr(&clean, &noise, snr, &mut rng).unwrap();
            assert!((measured_snr_db(clean.samples(), &m.scaled_noise) - snr).abs() < 1e-6);
        }
    }

    #[test]
    fn short_noise_is_tiled() {
        let clean = tone(1000, 0.05, 0.4);
        let noise = tone(37, 0.9, 0.2);
        let mut rng = StreamRng::seed_from_u64(9);
        let m = mix_at_snr(&clean, &noise, 5.0, &mut rng).unwrap();
        assert_eq!(m.scaled_noise.len(), 1000);
        for i in 0..1000 - 37 {
            assert!((m.scaled_noise[i] - m.scaled_noise[i + 37]).abs() < 1e-15);
        }
    }

    #[test]
    fn contract_errors() {
        let mut rng = StreamRng::seed_from_u64(0);
        let silent = Waveform::new(vec![0.0; 100], 16000).unwrap();
        let noise = tone(500, 0.3, 0.5);
        assert!(mix_at_snr(&silent, &noise, 0.0, &mut rng).is_err());
        let clean = tone(100, 0.3, 0.5);
        let silent_noise = Waveform::new(vec![0.0; 500], 16000).unwrap();
        let err = mix_at_snr(&clean, &silent_noise, 0.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("silent"), "{err}");
        let other_rate = Waveform::new(vec![0.1; 500], 8000).unwrap();
        assert!(mix_at_snr(&clean, &other_rate, 0.0, &mut rng).is_err());
    }

    #[test]
    fn infinite_snr_is_clean_passthrough() {
        let clean = tone(300, 0.2, 0.5);
        let noise = tone(900, 0.7, 0.5);
        let mut rng = StreamRng::seed_from_u64(4);
        let m = mix_at_snr(&clean, &noise, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(m.noisy, clean);
    }

    #[test]
    fn clipping_is_counted_not_rescaled() {
        let clean = Waveform::new(vec![0.9; 100], 16000).unwrap();
        let noise = Waveform::new(vec![0.5; 100], 16000).unwrap();
        let mut rng = StreamRng::seed_from_u64(4);
        let m = mix_at_snr(&clean, &noise, 0.0, &mut rng).unwrap();
        assert_eq!(m.clipped, 100);
        assert!(m.noisy.samples().iter().all(|&s| s == 1.0));
        assert!((measured_snr_db(clean.samples(), &m.scaled_noise)).abs() < 1e-9);
    }

    #[test]
    fn assignment_is_seeded_and_uniform() {
        let levels = [0.0, 5.0, 10.0, 15.0, 20.0];
        let a = assign_contamination(10_000, 5, &levels, 7);
        assert_eq!(a, assign_contamination(10_000, 5, &levels, 7));
        assert_ne!(a, assign_contamination(10_000, 5, &levels, 8));

        let mut counts = [[0usize; 5]; 5];
        for &(n, s) in &a {
            counts[n][levels.iter().position(|&l| l == s).unwrap()] += 1;
        }
        // Multinomial cell count: mean N/25, sd sqrt(N p (1-p)).
        let p: f64 = 1.0 / 25.0;
        let mean = 10_000.0 * p;
        let sd = (10_000.0 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for row in counts {
            for c in row {
                assert!((c as f64 - mean).abs() < 3.0 * sd + 1.0, "cell count {c}");
                chi2 += (c as f64 - mean).powi(2) / mean;
            }
        }
        // 24 degrees of freedom; 0.999 quantile is about 51.2.
        assert!(chi2 < 51.2, "chi2 {chi2}");
    }
}
