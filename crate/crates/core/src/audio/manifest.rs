use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled utterance. `path` (and `clean_path`, for contaminated
/// records) are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub path: String,
    pub label: usize,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    /// The uncontaminated source of a noisy record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    class_names: Vec<String>,
    seed: u64,
}

/// Line-delimited JSON: a header line with `class_names` and `seed`, then one
/// record per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub records: Vec<UtteranceRecord>,
    /// Directory relative record paths resolve against. Not serialized.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, seed: u64, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            class_names,
            seed,
            records: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Manifest("no class names".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= self.class_names.len() {
                return Err(Error::Manifest(format!(
                    "record {i} ({}) has label {} but only {} classes exist",
                    r.path,
                    r.label,
                    self.class_names.len()
                )));
            }
            if r.noise_type.is_some() != r.snr_db.is_some() {
                return Err(Error::Manifest(format!(
                    "record {i} ({}): noise_type and snr_db must be given together",
                    r.path
                )));
            }
        }
        Ok(())
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            class_names: self.class_names.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Manifest(e.to_string()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Manifest(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| Error::Manifest(format!("line 1 (header): {e}")))?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<UtteranceRecord>>>()?;
        let m = Self {
            class_names: header.class_names,
            seed: header.seed,
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Writes the manifest to `path` and rebases it on `path`'s directory.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))?;
        self.base_dir = parent_dir(path);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, parent_dir(path))
    }

    /// A copy holding only `records`, sharing this manifest's header.
    pub fn with_records(&self, records: Vec<UtteranceRecord>) -> Self {
        Self {
            class_names: self.class_names.clone(),
            seed: self.seed,
            records,
            base_dir: self.base_dir.clone(),
        }
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(label: usize, speaker: &str) -> UtteranceRecord {
        UtteranceRecord {
            path: format!("clean/{speaker}_{label}.wav"),
            label,
            speaker: speaker.into(),
            noise_type: None,
            snr_db: None,
            clean_path: None,
        }
    }

    #[test]
    fn header_then_records() {
        let mut m = Manifest::new(vec!["a".into(), "b".into()], 7, ".");
        m.records.push(record(1, "spk00"));
        let text = m.to_jsonl().unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            r#"{"class_names":["a","b"],"seed":7}"#
        );
        assert_eq!(
            lines.next().unwrap(),
            r#"{"path":"clean/spk00_1.wav","label":1,"speaker":"spk00"}"#
        );
    }

    #[test]
    fn invalid_records_are_rejected() {
        let header = r#"{"class_names":["a","b"],"seed":1}"#;
        let bad_label = format!("{header}\n{}", r#"{"path":"x","label":2,"speaker":"s"}"#);
        assert!(Manifest::from_jsonl(&bad_label, ".").is_err());
        let half_tag = format!(
            "{header}\n{}",
            r#"{"path":"x","label":0,"speaker":"s","snr_db":5.0}"#
        );
        assert!(Manifest::from_jsonl(&half_tag, ".").is_err());
        assert!(Manifest::from_jsonl("", ".").is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trips(
            labels in prop::collection::vec(0usize..4, 0..20),
            snrs in prop::collection::vec(prop::option::of(-30.0f64..40.0), 20),
            seed in any::<u64>(),
        ) {
            let mut m = Manifest::new(
                ["happy", "angry", "neutral", "sad"].iter().map(|s| s.to_string()).collect(),
                seed,
                "base",
            );
            for (i, (&label, snr)) in labels.iter().zip(&snrs).enumerate() {
                let mut r = record(label, &format!("spk{:02}", i % 3));
                if let Some(s) = snr {
                    r.noise_type = Some("hf-static".into());
                    r.snr_db = Some(*s);
                    r.clean_path = Some(format!("../clean/{i}.wav"));
                }
                m.records.push(r);
            }
            let back = Manifest::from_jsonl(&m.to_jsonl().unwrap(), "base").unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
