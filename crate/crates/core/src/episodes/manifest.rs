use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub label: String,
    pub dataset: String,
    pub language: String,
    pub split: Split,
    pub duration_s: f64,
}

/// Checks per-record invariants and id uniqueness.
pub fn validate_records(records: &[SampleRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let fail = |message: String| Error::Manifest { index, message };
        if r.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if r.label.is_empty() || r.dataset.is_empty() {
            return Err(fail(format!("record {:?} has an empty label or dataset", r.id)));
        }
        if !(r.duration_s.is_finite() && r.duration_s >= 0.0) {
            return Err(fail(format!(
                "record {:?} has invalid duration {}",
                r.id, r.duration_s
            )));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(fail(format!("duplicate id {:?}", r.id)));
        }
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Manifest {
        index: 0,
        message: format!("malformed manifest JSON: {e}"),
    })?;
    let records = values
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_json::from_value(v).map_err(|e| Error::Manifest {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<SampleRecord>>>()?;
    validate_records(&records)?;
    Ok(records)
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Records together with their loaded features, index-aligned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub records: Vec<SampleRecord>,
    pub features: Vec<FeatureSequence>,
}

impl Corpus {
    pub fn new(records: Vec<SampleRecord>, features: Vec<FeatureSequence>) -> Result<Self> {
        if records.len() != features.len() {
            return Err(Error::Dimension(format!(
                "{} records but {} feature sequences",
                records.len(),
                features.len()
            )));
        }
        validate_records(&records)?;
        let channels: HashSet<usize> = features.iter().map(FeatureSequence::channels).collect();
        if channels.len() > 1 {
            return Err(Error::Dimension(format!(
                "feature channel counts differ across corpus: {channels:?}"
            )));
        }
        Ok(Self { records, features })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.features.first().map(FeatureSequence::channels)
    }

    /// Concatenates corpora; ids must stay unique.
    pub fn merge(mut self, other: Corpus) -> Result<Self> {
        self.records.extend(other.records);
        self.features.extend(other.features);
        Corpus::new(self.records, self.features)
    }

    /// Keeps only records satisfying `keep`, preserving order.
    pub fn retain(self, mut keep: impl FnMut(&SampleRecord) -> bool) -> Self {
        let (records, features) = self
            .records
            .into_iter()
            .zip(self.features)
            .filter(|(r, _)| keep(r))
            .unzip();
        Self { records, features }
    }

    /// Loads a manifest and every feature file it references. Relative paths
    /// resolve against the manifest's directory. `.wav` files go through the
    /// log-mel frontend with default parameters.
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let features = records
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let p = resolve(&base, &r.path);
                features::read_any(&p).map_err(|e| match e {
                    Error::Io { .. } => e,
                    other => Error::Manifest {
                        index,
                        message: format!("{}: {other}", p.display()),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(records, features)
    }

    /// Writes every feature sequence to `dir/<path>` and the manifest to
    /// `dir/manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            ));
        }
        for (r, f) in self.records.iter().zip(&self.features) {
            let p = dir.join(&r.path);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            features::write_fseq(&p, f)?;
        }
        let manifest = dir.join("manifest.json");
        write_manifest(&manifest, &self.records)?;
        Ok(manifest)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            path: format!("{id}.fseq"),
            label: "happy".into(),
            dataset: "d0".into(),
            language: "en".into(),
            split: Split::Train,
            duration_s: 1.0,
        }
    }

    #[test]
    fn empty_array_is_empty_manifest() {
        assert!(parse_manifest("[]").unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = serde_json::to_string(&vec![rec("a"), rec("b"), rec("a")]).unwrap();
        match parse_manifest(&text).unwrap_err() {
            Error::Manifest { index, message } => {
                assert_eq!(index, 2);
                assert!(message.contains("\"a\""));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn missing_field_reports_record_index() {
        let text = r#"[{"id":"a","path":"a","label":"x","dataset":"d","language":"en","split":"train","duration_s":1.0},
                       {"id":"b","path":"b","label":"x","dataset":"d","split":"train","duration_s":1.0}]"#;
        match parse_manifest(text).unwrap_err() {
            Error::Manifest { index, message } => {
                assert_eq!(index, 1);
                assert!(message.contains("language"));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            parse_manifest("{not json").unwrap_err(),
            Error::Manifest { .. }
        ));
    }

    #[test]
    fn split_names() {
        let text = serde_json::to_string(&Split::Validation).unwrap();
        assert_eq!(text, "\"validation\"");
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
    }
}
