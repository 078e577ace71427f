use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mlkd::audio::{
    build_noisy_manifest, gen_noise_bank, gen_synth_corpus, measured_snr_db, read_wav,
    CorpusConfig, Manifest, NoiseKind, NoiseSource,
};
use rustfft::{num_complex::Complex, FftPlanner};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mlkd-audio-it-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn corpus_cfg(seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_speakers: 10,
        utt_per_class_per_speaker: 5,
        duration_s: 1.0,
        sample_rate: 16000,
        seed,
    }
}

/// Magnitude-squared spectrum frames (Hann window).
fn power_frames(x: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n_fft as f64).cos())
        .collect();
    let mut frames = Vec::new();
    let mut start = 0;
    while start + n_fft <= x.len() {
        let mut buf: Vec<Complex<f64>> = x[start..start + n_fft]
            .iter()
            .zip(&window)
            .map(|(v, w)| Complex::new(v * w, 0.0))
            .collect();
        fft.process(&mut buf);
        frames.push(buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
        start += hop;
    }
    frames
}

fn mean_log_spectrum(x: &[f64]) -> Vec<f64> {
    let frames = power_frames(x, 1024, 512);
    let bins = frames[0].len();
    let mut out = vec![0.0; bins];
    for f in &frames {
        for (o, p) in out.iter_mut().zip(f) {
            *o += (p + 1e-10).ln();
        }
    }
    out.iter().map(|v| v / frames.len() as f64).collect()
}

fn spectral_centroid(x: &[f64], sample_rate: f64) -> f64 {
    let frames = power_frames(x, 1024, 1024);
    let bins = frames[0].len();
    let mut total = vec![0.0; bins];
    for f in &frames {
        for (t, p) in total.iter_mut().zip(f) {
            *t += p;
        }
    }
    let hz = |k: usize| k as f64 * sample_rate / 1024.0;
    let num: f64 = total.iter().enumerate().map(|(k, p)| hz(k) * p).sum();
    num / total.iter().sum::<f64>()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_counts_and_balance() {
    let dir = scratch("counts");
    let m = gen_synth_corpus(&corpus_cfg(7), &dir).unwrap();
    assert_eq!(m.records.len(), 200);
    assert_eq!(m.speakers().len(), 10);
    for k in 0..4 {
        assert_eq!(m.records.iter().filter(|r| r.label == k).count(), 50);
    }
    for spk in m.speakers() {
        let labels: BTreeSet<usize> = m
            .records
            .iter()
            .filter(|r| r.speaker == spk)
            .map(|r| r.label)
            .collect();
        assert_eq!(labels.len(), 4, "speaker {spk} missing a class");
    }
    let w = read_wav(m.resolve(&m.records[0].path)).unwrap();
    assert_eq!(w.len(), 16000);
    assert_eq!(w.sample_rate(), 16000);
}

#[test]
fn corpus_and_noise_are_byte_deterministic() {
    let a = scratch("det-a");
    let b = scratch("det-b");
    let small = CorpusConfig {
        n_speakers: 2,
        utt_per_class_per_speaker: 2,
        duration_s: 0.25,
        ..corpus_cfg(11)
    };
    let mut ma = gen_synth_corpus(&small, &a).unwrap();
    let mut mb = gen_synth_corpus(&small, &b).unwrap();
    ma.save(a.join("manifest.jsonl")).unwrap();
    mb.save(b.join("manifest.jsonl")).unwrap();
    gen_noise_bank(&NoiseKind::ALL, 1.0, 16000, 11, a.join("noise")).unwrap();
    gen_noise_bank(&NoiseKind::ALL, 1.0, 16000, 11, b.join("noise")).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let c = scratch("det-c");
    gen_synth_corpus(&CorpusConfig { seed: 12, ..small }, &c).unwrap();
    assert_ne!(
        std::fs::read(a.join(&ma.records[0].path)).unwrap(),
        std::fs::read(c.join(&ma.records[0].path)).unwrap()
    );
}

#[test]
fn noise_kinds_have_distinct_centroids() {
    let dir = scratch("noise");
    let files = gen_noise_bank(&NoiseKind::ALL, 2.0, 16000, 7, &dir).unwrap();
    assert_eq!(files.len(), 5);
    let centroids: Vec<f64> = files
        .iter()
        .map(|p| spectral_centroid(read_wav(p).unwrap().samples(), 16000.0))
        .collect();
    for i in 0..5 {
        for j in i + 1..5 {
            assert!(
                (centroids[i] - centroids[j]).abs() > 0.0,
                "centroids {centroids:?}"
            );
        }
    }
    // hf-static is the brightest, lowfreq-hum the darkest.
    let max = centroids.iter().cloned().fold(f64::MIN, f64::max);
    let min = centroids.iter().cloned().fold(f64::MAX, f64::min);
    assert_eq!(centroids[3], max);
    assert_eq!(centroids[4], min);

    assert!(gen_noise_bank(&[], 1.0, 16000, 7, dir.join("empty"))
        .unwrap()
        .is_empty());
    assert!(!dir.join("empty").exists());
    assert!("pink".parse::<NoiseKind>().is_err());
}

/// Nearest-class-mean (a linear rule) on mean log spectra, trained on eight
/// speakers and tested on the other two.
#[test]
fn clean_corpus_is_linearly_separable() {
    let dir = scratch("learnable");
    let m = gen_synth_corpus(&corpus_cfg(7), &dir).unwrap();
    let feats: Vec<(Vec<f64>, usize, bool)> = m
        .records
        .iter()
        .map(|r| {
            let w = read_wav(m.resolve(&r.path)).unwrap();
            let held_out = r.speaker == "spk08" || r.speaker == "spk09";
            (mean_log_spectrum(w.samples()), r.label, held_out)
        })
        .collect();
    let dims = feats[0].0.len();
    let mut means = vec![vec![0.0; dims]; 4];
    let mut counts = [0usize; 4];
    for (f, y, held) in &feats {
        if !held {
            counts[*y] += 1;
            for (m, v) in means[*y].iter_mut().zip(f) {
                *m += v;
            }
        }
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    for (f, y, held) in &feats {
        if !held {
            continue;
        }
        let pred = (0..4)
            .min_by(|&a, &b| {
                let da: f64 = f.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                let db: f64 = f.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        totals[*y] += 1;
        hits[*y] += usize::from(pred == *y);
    }
    let ua: f64 = (0..4)
        .map(|k| hits[k] as f64 / totals[k] as f64)
        .sum::<f64>()
        / 4.0;
    assert!(ua > 0.9, "UA {ua}, hits {hits:?} of {totals:?}");
}

#[test]
fn noisy_manifest_tags_every_record_and_hits_snr() {
    let dir = scratch("noisy");
    let cfg = CorpusConfig {
        n_speakers: 2,
        utt_per_class_per_speaker: 2,
        duration_s: 0.3,
        ..corpus_cfg(5)
    };
    let mut clean = gen_synth_corpus(&cfg, dir.join("corpus")).unwrap();
    clean.save(dir.join("corpus/manifest.jsonl")).unwrap();
    gen_noise_bank(&NoiseKind::ALL, 1.0, 16000, 5, dir.join("noise")).unwrap();
    let noises = NoiseSource::load_dir(dir.join("noise")).unwrap();
    let levels = [0.0, 5.0, 10.0, 15.0, 20.0];

    let noisy = build_noisy_manifest(&clean, &noises, &levels, 9, dir.join("noisy")).unwrap();
    assert_eq!(noisy.records.len(), clean.records.len());
    for (n, c) in noisy.records.iter().zip(&clean.records) {
        assert_eq!((n.label, &n.speaker), (c.label, &c.speaker));
        let snr = n.snr_db.unwrap();
        assert!(levels.contains(&snr));
        assert!(noises
            .iter()
            .any(|s| Some(&s.name) == n.noise_type.as_ref()));
        // The stored clean path resolves back to the source utterance.
        let src = read_wav(noisy.resolve(n.clean_path.as_ref().unwrap())).unwrap();
        let mixed = read_wav(noisy.resolve(&n.path)).unwrap();
        let residual: Vec<f64> = mixed
            .samples()
            .iter()
            .zip(src.samples())
            .map(|(m, s)| m - s)
            .collect();
        // Both files are PCM16-quantized, so allow for rounding.
        assert!((measured_snr_db(src.samples(), &residual) - snr).abs() < 0.05);
    }
    let again = build_noisy_manifest(&clean, &noises, &levels, 9, dir.join("noisy2")).unwrap();
    assert_eq!(noisy.to_jsonl().unwrap(), again.to_jsonl().unwrap());

    let only_zero = build_noisy_manifest(&clean, &noises, &[0.0], 9, dir.join("noisy0")).unwrap();
    assert!(only_zero.records.iter().all(|r| r.snr_db == Some(0.0)));
    assert!(build_noisy_manifest(&clean, &noises, &[], 9, dir.join("bad")).is_err());

    let reloaded = Manifest::load(dir.join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(reloaded.records, clean.records);
}
