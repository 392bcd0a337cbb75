//! Annotation records, their invariants, and the line-delimited dataset file.
//!
//! One record per line, each a flat JSON object. Keys this module does not
//! know about are kept in [`SamplePair::extra`] and written back on export,
//! so foreign annotation fields survive a load/export cycle untouched.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::score_codec::{category_to_hit, encode_element_score, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptType {
    Real,
    Synthetic,
}

impl PromptType {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptType::Real => "real",
            PromptType::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for PromptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A fine-grained prompt element with its annotated match score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementAnnotation {
    #[serde(rename = "name")]
    pub element_name: String,
    pub category: String,
    /// Continuous match score in `[0, 1]`, absent when unlabeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Binary hit derived from `score` at the default threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit: Option<bool>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ElementAnnotation {
    pub fn new(name: impl Into<String>, category: impl Into<String>, score: Option<f64>) -> Self {
        Self {
            element_name: name.into(),
            category: category.into(),
            score,
            hit: None,
            extra: Map::new(),
        }
    }

    /// Name with the category appended, unless the name already carries a
    /// trailing parenthesised tag (as EvalMuse element keys do).
    pub fn display_label(&self) -> String {
        if self.element_name.trim_end().ends_with(')') || self.category.is_empty() {
            self.element_name.clone()
        } else {
            format!("{} ({})", self.element_name, self.category)
        }
    }
}

/// One (image, prompt) pair with its annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub sample_id: String,
    pub prompt_id: String,
    pub prompt: String,
    pub prompt_type: PromptType,
    pub image_ref: String,
    pub split: Split,
    /// Mean annotator score in `[1, 5]`; absent for unlabeled samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_score: Option<f64>,
    #[serde(default)]
    pub elements: Vec<ElementAnnotation>,
    pub meaninglessness: f64,
    pub split_confidence: f64,
    pub attribute_confidence: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SamplePair {
    pub fn element(&self, name: &str) -> Option<&ElementAnnotation> {
        self.elements.iter().find(|e| e.element_name == name)
    }

    /// Elements ordered by name; every per-element output follows this order.
    pub fn sorted_elements(&self) -> Vec<&ElementAnnotation> {
        let mut elements: Vec<_> = self.elements.iter().collect();
        elements.sort_by(|a, b| a.element_name.cmp(&b.element_name));
        elements
    }
}

/// A single invariant violation found on a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn check_range(out: &mut Vec<Violation>, field: String, value: f64, lo: f64, hi: f64) {
    if !(lo..=hi).contains(&value) {
        out.push(Violation {
            field,
            message: format!("{value} outside [{lo}, {hi}]"),
        });
    }
}

/// Checks every sample invariant; an empty report means the sample is valid.
pub fn validate_sample(sample: &SamplePair) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.prompt.is_empty() {
        out.push(Violation {
            field: "prompt".into(),
            message: "must be non-empty".into(),
        });
    }
    if sample.image_ref.is_empty() {
        out.push(Violation {
            field: "image_ref".into(),
            message: "must be non-empty".into(),
        });
    }
    if let Some(total) = sample.total_score {
        check_range(&mut out, "total_score".into(), total, 1.0, 5.0);
    }
    check_range(&mut out, "meaninglessness".into(), sample.meaninglessness, 0.0, 1.0);
    check_range(&mut out, "split_confidence".into(), sample.split_confidence, 0.0, 1.0);
    check_range(
        &mut out,
        "attribute_confidence".into(),
        sample.attribute_confidence,
        0.0,
        1.0,
    );

    let mut seen = HashSet::new();
    for element in &sample.elements {
        if !seen.insert(element.element_name.as_str()) {
            out.push(Violation {
                field: "elements".into(),
                message: format!("duplicate element `{}`", element.element_name),
            });
        }
        let field = format!("elements[{}].score", element.element_name);
        match element.score {
            Some(score) if !(0.0..=1.0).contains(&score) => {
                check_range(&mut out, field, score, 0.0, 1.0);
            }
            Some(score) => {
                if let Some(hit) = element.hit {
                    let expected = encode_element_score(score)
                        .map(|c| category_to_hit(c, DEFAULT_TAU))
                        .unwrap_or(false);
                    if hit != expected {
                        out.push(Violation {
                            field: format!("elements[{}].hit", element.element_name),
                            message: format!("{hit} disagrees with score {score}"),
                        });
                    }
                }
            }
            None => {
                if element.hit.is_some() {
                    out.push(Violation {
                        field: format!("elements[{}].hit", element.element_name),
                        message: "present without a score".into(),
                    });
                }
            }
        }
    }
    out
}

/// Samples grouped by split. Immutable once loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub validation: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl DatasetSplit {
    pub fn from_samples(samples: impl IntoIterator<Item = SamplePair>) -> Self {
        let mut split = DatasetSplit::default();
        for sample in samples {
            split.list_mut(sample.split).push(sample);
        }
        split
    }

    pub fn list(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn list_mut(&mut self, split: Split) -> &mut Vec<SamplePair> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples in export order: train, validation, test.
    pub fn iter(&self) -> impl Iterator<Item = &SamplePair> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRecord {
    pub line: usize,
    pub sample_id: String,
    pub violations: Vec<Violation>,
}

/// What a lenient load dropped and why.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub records_read: usize,
    pub rejected: Vec<RejectedRecord>,
}

impl LoadReport {
    pub fn violation_count(&self) -> usize {
        self.rejected.len()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: sample `{sample_id}` violates invariants: {}", join(.violations))]
    Invalid {
        line: usize,
        sample_id: String,
        violations: Vec<Violation>,
    },
    #[error("line {line}: duplicate sample_id `{sample_id}`")]
    DuplicateId { line: usize, sample_id: String },
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses dataset records from any buffered reader.
pub fn read_dataset<R: BufRead>(
    reader: R,
    strict: bool,
) -> Result<(DatasetSplit, LoadReport), DatasetError> {
    let mut split = DatasetSplit::default();
    let mut report = LoadReport::default();
    let mut ids = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Read {
            path: PathBuf::from("<reader>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        report.records_read += 1;
        let sample: SamplePair = serde_json::from_str(&line).map_err(|source| {
            DatasetError::Malformed {
                line: line_no,
                source,
            }
        })?;

        let mut violations = validate_sample(&sample);
        if ids.contains(&sample.sample_id) {
            if strict {
                return Err(DatasetError::DuplicateId {
                    line: line_no,
                    sample_id: sample.sample_id,
                });
            }
            violations.push(Violation {
                field: "sample_id".into(),
                message: format!("duplicate `{}`", sample.sample_id),
            });
        }
        if !violations.is_empty() {
            if strict {
                return Err(DatasetError::Invalid {
                    line: line_no,
                    sample_id: sample.sample_id,
                    violations,
                });
            }
            report.rejected.push(RejectedRecord {
                line: line_no,
                sample_id: sample.sample_id,
                violations,
            });
            continue;
        }
        ids.insert(sample.sample_id.clone());
        split.list_mut(sample.split).push(sample);
    }
    Ok((split, report))
}

/// Loads a dataset file. Strict mode aborts on the first invariant
/// violation; lenient mode drops violating records and lists them in the
/// report.
pub fn load_dataset(
    path: impl AsRef<Path>,
    strict: bool,
) -> Result<(DatasetSplit, LoadReport), DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(BufReader::new(file), strict).map_err(|e| match e {
        DatasetError::Read { source, .. } => DatasetError::Read {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn write_samples<'a, W: Write>(
    mut writer: W,
    samples: impl IntoIterator<Item = &'a SamplePair>,
) -> std::io::Result<usize> {
    let mut count = 0;
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
        count += 1;
    }
    writer.flush()?;
    Ok(count)
}

/// Writes every sample (train, validation, test) and returns the count.
pub fn export_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<usize, DatasetError> {
    let path = path.as_ref();
    let wrap = |source| DatasetError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(wrap)?;
    write_samples(BufWriter::new(file), split.iter()).map_err(wrap)
}
