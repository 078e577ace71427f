//! Unweighted accuracy (macro-averaged recall), leave-one-speaker-out folds
//! and the noise-type × SNR results grid.

use std::fmt::Write as _;

use serde::Serialize;

use crate::audio::{mix_at_snr, Manifest, NoiseSource, UtteranceRecord, Waveform};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed;
use crate::train::{load_examples, Example};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Invalid(
                "cannot merge confusion matrices of different sizes".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Mean over classes of `cm[k][k] / rowsum(k)`. Every class needs at least
/// one true sample.
pub fn unweighted_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    for (k, row) in cm.counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n == 0 {
            return Err(Error::Invalid(format!("class {k} has no test samples")));
        }
        sum += row[k] as f64 / n as f64;
    }
    Ok(sum / cm.n_classes() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub speaker: String,
    pub train: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

/// One fold per distinct speaker, ordered by speaker id.
pub fn loso_folds(manifest: &Manifest) -> Result<Vec<Fold>> {
    let speakers: Vec<&str> = manifest
        .records
        .iter()
        .map(|r| r.speaker.as_str())
        .collect();
    Ok(loso_indices(&speakers)?
        .into_iter()
        .map(|(speaker, train, test)| Fold {
            speaker,
            train: train.iter().map(|&i| manifest.records[i].clone()).collect(),
            test: test.iter().map(|&i| manifest.records[i].clone()).collect(),
        })
        .collect())
}

/// `(speaker, train indices, test indices)`.
pub type FoldIndices = (String, Vec<usize>, Vec<usize>);

/// One [`FoldIndices`] per held-out speaker, ordered by speaker id.
pub fn loso_indices(speakers: &[&str]) -> Result<Vec<FoldIndices>> {
    let mut distinct: Vec<&str> = speakers.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Invalid(format!(
            "leave-one-speaker-out needs at least 2 speakers, found {}",
            distinct.len()
        )));
    }
    Ok(distinct
        .into_iter()
        .map(|held| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..speakers.len()).partition(|&i| speakers[i] == held);
            (held.to_string(), train, test)
        })
        .collect())
}

pub fn evaluate_model(model: &Model, examples: &[Example]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().n_classes);
    for e in examples {
        cm.record(e.label, argmax(&model.predict(&e.samples)?));
    }
    Ok(cm)
}

#[derive(Debug, Clone)]
pub struct RecordEvaluation {
    pub confusion: ConfusionMatrix,
    /// `(path, reason)` for each record that could not be read.
    pub skipped: Vec<(String, String)>,
}

/// Evaluates manifest records, skipping (and reporting) unreadable files.
pub fn evaluate_records(model: &Model, manifest: &Manifest) -> Result<RecordEvaluation> {
    let mut confusion = ConfusionMatrix::new(model.config().n_classes);
    let mut skipped = Vec::new();
    for r in &manifest.records {
        match load_examples(&manifest.with_records(vec![r.clone()]), false) {
            Ok(ex) => confusion.record(r.label, argmax(&model.predict(&ex[0].samples)?)),
            Err(e) => skipped.push((r.path.clone(), e.to_string())),
        }
    }
    Ok(RecordEvaluation { confusion, skipped })
}

/// UA per (SNR, noise) cell plus each noise type's mean over SNRs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsGrid {
    pub noise_types: Vec<String>,
    pub snr_levels: Vec<f64>,
    /// `cells[s][n]` is the UA at `snr_levels[s]` with `noise_types[n]`.
    pub cells: Vec<Vec<f64>>,
    /// Mean over SNR levels for each noise type.
    pub means: Vec<f64>,
}

impl ResultsGrid {
    pub fn new(
        noise_types: Vec<String>,
        snr_levels: Vec<f64>,
        cells: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if cells.len() != snr_levels.len() || cells.iter().any(|r| r.len() != noise_types.len()) {
            return Err(Error::Invalid("grid cells do not match its axes".into()));
        }
        if snr_levels.is_empty() {
            return Err(Error::Invalid("grid needs at least one SNR level".into()));
        }
        let means = (0..noise_types.len())
            .map(|n| cells.iter().map(|r| r[n]).sum::<f64>() / snr_levels.len() as f64)
            .collect();
        Ok(Self {
            noise_types,
            snr_levels,
            cells,
            means,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.noise_types.len() * self.snr_levels.len()
    }

    /// Rows are SNR levels then `Mean`; columns are noise types; values are
    /// UA in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db");
        for n in &self.noise_types {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        let mut row = |label: String, values: &[f64]| {
            out.push_str(&label);
            for v in values {
                write!(out, ",{}", 100.0 * v).unwrap();
            }
            out.push('\n');
        };
        for (snr, values) in self.snr_levels.iter().zip(&self.cells) {
            row(snr_label(*snr), values);
        }
        row("Mean".into(), &self.means);
        out
    }
}

pub fn snr_label(snr: f64) -> String {
    if snr == f64::INFINITY {
        "clean".into()
    } else {
        snr.to_string()
    }
}

/// Contaminates every test example at one fixed (noise, SNR) per cell and
/// records UA. `f64::INFINITY` in `snr_levels` leaves the audio clean. Mixes
/// stay in memory at full precision.
pub fn evaluate_grid(
    model: &Model,
    test: &[Example],
    noises: &[NoiseSource],
    snr_levels: &[f64],
    seed: u64,
) -> Result<ResultsGrid> {
    if noises.is_empty() {
        return Err(Error::Invalid("noise bank is empty".into()));
    }
    let mut cells = Vec::with_capacity(snr_levels.len());
    for (s, &snr) in snr_levels.iter().enumerate() {
        let mut row = Vec::with_capacity(noises.len());
        for (n, noise) in noises.iter().enumerate() {
            let cell = (s * noises.len() + n) as u64;
            let mut cm = ConfusionMatrix::new(model.config().n_classes);
            for (i, e) in test.iter().enumerate() {
                let clean = Waveform::new(e.samples.clone(), e.sample_rate)?;
                let mut rng = seed::stream(seed, "grid", (cell << 32) | i as u64);
                let mix = mix_at_snr(&clean, &noise.wave, snr, &mut rng)?;
                cm.record(e.label, argmax(&model.predict(mix.noisy.samples())?));
            }
            row.push(unweighted_accuracy(&cm)?);
        }
        cells.push(row);
    }
    ResultsGrid::new(
        noises.iter().map(|n| n.name.clone()).collect(),
        snr_levels.to_vec(),
        cells,
    )
}
