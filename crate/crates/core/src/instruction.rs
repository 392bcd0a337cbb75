//! Rendering of instruction records for the total-matching and
//! element-matching tasks, plus the conversation corpus file.
//!
//! Template text is pinned by golden tests; changing a single byte here
//! changes every emitted corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, ElementAnnotation, SamplePair};
use crate::score_codec::{encode_element_score, encode_total_score, CodecError, ElementCategory};
use crate::seeding::record_rng;

pub const TEMPLATE_VERSION: u32 = 1;

pub const SYSTEM_TEXT: &str =
    "You are an expert judge of how well a generated image matches the text prompt it was generated from.";

const PREAMBLE: &str = "You are given an image and the prompt used to generate it.";
const ELEMENT_HEADER: &str = "Element ratings (1=absent … 7=perfect):";
const TOTAL_QUESTION: &str = "Rate the overall image-text alignment by choosing one letter from a (worst) to o (best). Answer with a single letter.";
const ELEMENT_QUESTION: &str = "Rate how well this element is depicted in the image, from 1 (absent) to 7 (perfect). Answer with a single digit from 1 to 7.";

pub const MAX_PERTURBATION: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Total,
    Element,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Total => "total",
            Task::Element => "element",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total" => Ok(Task::Total),
            "element" => Ok(Task::Element),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Query-side augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Embed per-element categories in the total-task query.
    pub include_elements: bool,
    pub include_confidences: bool,
    pub include_prompt_type: bool,
    /// Element label perturbation; 0 disables.
    pub perturbation_epsilon: u8,
    pub seed: u64,
}

impl BuildOptions {
    pub fn validate(&self) -> Result<(), InstructionError> {
        if self.perturbation_epsilon > MAX_PERTURBATION {
            return Err(InstructionError::InvalidOptions(format!(
                "perturbation_epsilon {} exceeds {MAX_PERTURBATION}",
                self.perturbation_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum InstructionError {
    #[error("sample `{0}`: element augmentation requested but no element scores given")]
    MissingElementScores(String),
    #[error("sample `{sample_id}` has no element `{element}`")]
    UnknownElement { sample_id: String, element: String },
    #[error("invalid build options: {0}")]
    InvalidOptions(String),
    #[error("sample `{sample_id}`: {source}")]
    Label {
        sample_id: String,
        source: CodecError,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionRecord {
    pub system_text: String,
    pub user_text: String,
    pub image_ref: String,
    /// One character from the task alphabet; absent at inference time.
    pub target_label: Option<char>,
    pub task: Task,
    pub sample_id: String,
    pub element_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// One line of the conversation corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub messages: Vec<Message>,
    pub images: Vec<String>,
    pub sample_id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_name: Option<String>,
}

impl InstructionRecord {
    pub fn to_corpus_line(&self) -> CorpusLine {
        let mut messages = vec![
            Message {
                role: "system".into(),
                content: self.system_text.clone(),
            },
            Message {
                role: "user".into(),
                content: self.user_text.clone(),
            },
        ];
        if let Some(label) = self.target_label {
            messages.push(Message {
                role: "assistant".into(),
                content: label.to_string(),
            });
        }
        CorpusLine {
            messages,
            images: vec![self.image_ref.clone()],
            sample_id: self.sample_id.clone(),
            task: self.task,
            element_name: self.element_name.clone(),
        }
    }
}

fn common_header(sample: &SamplePair, opts: &BuildOptions) -> Vec<String> {
    let mut lines = vec![PREAMBLE.to_string(), format!("Prompt: {}", sample.prompt)];
    if opts.include_prompt_type {
        lines.push(format!("Prompt type: {}", sample.prompt_type));
    }
    if opts.include_confidences {
        lines.push(format!(
            "Meaninglessness: {:.2}; Split confidence: {:.2}; Attribute confidence: {:.2}",
            sample.meaninglessness, sample.split_confidence, sample.attribute_confidence
        ));
    }
    lines
}

/// Ground-truth categories of every scored element, keyed by element name.
pub fn ground_truth_categories(
    sample: &SamplePair,
) -> Result<BTreeMap<String, ElementCategory>, InstructionError> {
    sample
        .elements
        .iter()
        .filter_map(|e| e.score.map(|s| (e, s)))
        .map(|(e, s)| {
            encode_element_score(s)
                .map(|c| (e.element_name.clone(), c))
                .map_err(|source| InstructionError::Label {
                    sample_id: sample.sample_id.clone(),
                    source,
                })
        })
        .collect()
}

/// Renders the total-matching query. `element_scores` are ground-truth
/// categories when building a training corpus and predicted ones when
/// building the second stage at test time.
pub fn build_total_instruction(
    sample: &SamplePair,
    element_scores: Option<&BTreeMap<String, ElementCategory>>,
    opts: &BuildOptions,
) -> Result<InstructionRecord, InstructionError> {
    opts.validate()?;
    let mut lines = common_header(sample, opts);
    if opts.include_elements {
        let scores = element_scores
            .ok_or_else(|| InstructionError::MissingElementScores(sample.sample_id.clone()))?;
        if !scores.is_empty() {
            lines.push(ELEMENT_HEADER.to_string());
            for (name, category) in scores {
                let label = sample
                    .element(name)
                    .map(ElementAnnotation::display_label)
                    .unwrap_or_else(|| name.clone());
                lines.push(format!("{label}: {category}"));
            }
        }
    }
    lines.push(TOTAL_QUESTION.to_string());

    let target_label = sample
        .total_score
        .map(|s| encode_total_score(s).map(|level| level.letter()))
        .transpose()
        .map_err(|source| InstructionError::Label {
            sample_id: sample.sample_id.clone(),
            source,
        })?;

    Ok(InstructionRecord {
        system_text: SYSTEM_TEXT.to_string(),
        user_text: lines.join("\n"),
        image_ref: sample.image_ref.clone(),
        target_label,
        task: Task::Total,
        sample_id: sample.sample_id.clone(),
        element_name: None,
    })
}

/// Renders the element-matching query for one element of `sample`. The
/// target label is perturbed when `opts.perturbation_epsilon > 0`, with a
/// generator derived from the seed, sample id and element name.
pub fn build_element_instruction(
    sample: &SamplePair,
    element: &ElementAnnotation,
    opts: &BuildOptions,
) -> Result<InstructionRecord, InstructionError> {
    opts.validate()?;
    if sample.element(&element.element_name).is_none() {
        return Err(InstructionError::UnknownElement {
            sample_id: sample.sample_id.clone(),
            element: element.element_name.clone(),
        });
    }
    let mut lines = common_header(sample, opts);
    lines.push(format!("Element: {}", element.display_label()));
    lines.push(ELEMENT_QUESTION.to_string());

    let target_label = match element.score {
        Some(score) => {
            let category = encode_element_score(score).map_err(|source| InstructionError::Label {
                sample_id: sample.sample_id.clone(),
                source,
            })?;
            let mut rng = record_rng(
                opts.seed,
                &["perturb", &sample.sample_id, &element.element_name],
            );
            Some(perturb_element_label(category, opts.perturbation_epsilon, &mut rng).label())
        }
        None => None,
    };

    Ok(InstructionRecord {
        system_text: SYSTEM_TEXT.to_string(),
        user_text: lines.join("\n"),
        image_ref: sample.image_ref.clone(),
        target_label,
        task: Task::Element,
        sample_id: sample.sample_id.clone(),
        element_name: Some(element.element_name.clone()),
    })
}

/// Adds `-ε` or `+ε` with equal probability and clamps into `1..=7`.
pub fn perturb_element_label<R: Rng + ?Sized>(
    category: ElementCategory,
    epsilon: u8,
    rng: &mut R,
) -> ElementCategory {
    if epsilon == 0 {
        return category;
    }
    let delta = if rng.random_bool(0.5) {
        epsilon as i32
    } else {
        -(epsilon as i32)
    };
    ElementCategory::clamped(category.digit() as i32 + delta)
}

/// Renders one record per train sample (total task) or per train
/// (sample, element) pair (element task), in input order.
pub fn render_corpus(
    split: &DatasetSplit,
    task: Task,
    opts: &BuildOptions,
) -> Result<Vec<InstructionRecord>, InstructionError> {
    opts.validate()?;
    let per_sample: Result<Vec<Vec<InstructionRecord>>, _> = split
        .train
        .par_iter()
        .map(|sample| match task {
            Task::Total => {
                let scores = if opts.include_elements {
                    Some(ground_truth_categories(sample)?)
                } else {
                    None
                };
                Ok(vec![build_total_instruction(sample, scores.as_ref(), opts)?])
            }
            Task::Element => sample
                .elements
                .iter()
                .map(|e| build_element_instruction(sample, e, opts))
                .collect(),
        })
        .collect();
    Ok(per_sample?.into_iter().flatten().collect())
}

pub fn write_corpus<W: Write>(mut writer: W, records: &[InstructionRecord]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, &record.to_corpus_line())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Renders and writes the training corpus; returns the record count.
pub fn build_training_corpus(
    split: &DatasetSplit,
    task: Task,
    opts: &BuildOptions,
    out: impl AsRef<Path>,
) -> Result<usize, InstructionError> {
    let out = out.as_ref();
    let records = render_corpus(split, task, opts)?;
    let wrap = |source| InstructionError::Write {
        path: out.to_path_buf(),
        source,
    };
    let file = File::create(out).map_err(wrap)?;
    write_corpus(BufWriter::new(file), &records).map_err(wrap)?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::sample;
    use crate::dataset::{PromptType, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat(d: u8) -> ElementCategory {
        ElementCategory::new(d).unwrap()
    }

    #[test]
    fn plain_total_record_targets_top_letter() {
        let mut s = sample("s1", Split::Train);
        s.total_score = Some(5.0);
        let r = build_total_instruction(&s, None, &BuildOptions::default()).unwrap();
        assert_eq!(r.target_label, Some('o'));
        assert_eq!(r.task, Task::Total);
        assert!(r.user_text.contains(&s.prompt));
        assert_eq!(
            r.user_text,
            "You are given an image and the prompt used to generate it.\n\
             Prompt: a dog chasing a red ball\n\
             Rate the overall image-text alignment by choosing one letter from a (worst) to o (best). Answer with a single letter."
        );
    }

    #[test]
    fn total_record_golden_with_all_augmentations() {
        let mut s = sample("s1", Split::Train);
        s.elements = vec![ElementAnnotation::new("dog (object)", "object", Some(1.0))];
        let scores = BTreeMap::from([("dog (object)".to_string(), cat(7))]);
        let opts = BuildOptions {
            include_elements: true,
            include_confidences: true,
            include_prompt_type: true,
            ..Default::default()
        };
        let r = build_total_instruction(&s, Some(&scores), &opts).unwrap();
        let golden = "You are given an image and the prompt used to generate it.\n\
                      Prompt: a dog chasing a red ball\n\
                      Prompt type: real\n\
                      Meaninglessness: 0.10; Split confidence: 0.90; Attribute confidence: 0.75\n\
                      Element ratings (1=absent … 7=perfect):\n\
                      dog (object): 7\n\
                      Rate the overall image-text alignment by choosing one letter from a (worst) to o (best). Answer with a single letter.";
        assert_eq!(r.user_text, golden);
        assert!(r.user_text.contains("dog (object): 7"));
        assert_eq!(r.target_label, Some('j')); // 3.5 -> 9.75 -> 10
    }

    #[test]
    fn element_lines_are_sorted_and_tagged() {
        let mut s = sample("s1", Split::Train);
        s.elements = vec![
            ElementAnnotation::new("zebra", "animal", None),
            ElementAnnotation::new("apple", "object", None),
        ];
        let scores = BTreeMap::from([("zebra".to_string(), cat(2)), ("apple".to_string(), cat(5))]);
        let opts = BuildOptions {
            include_elements: true,
            ..Default::default()
        };
        let text = build_total_instruction(&s, Some(&scores), &opts).unwrap().user_text;
        let a = text.find("apple (object): 5").unwrap();
        let z = text.find("zebra (animal): 2").unwrap();
        assert!(a < z);
    }

    #[test]
    fn empty_element_map_omits_section() {
        let s = sample("s1", Split::Test);
        let opts = BuildOptions {
            include_elements: true,
            ..Default::default()
        };
        let text = build_total_instruction(&s, Some(&BTreeMap::new()), &opts)
            .unwrap()
            .user_text;
        assert!(!text.contains("Element ratings"));
    }

    #[test]
    fn missing_element_scores_is_an_error() {
        let opts = BuildOptions {
            include_elements: true,
            ..Default::default()
        };
        let err = build_total_instruction(&sample("s1", Split::Train), None, &opts).unwrap_err();
        assert!(matches!(err, InstructionError::MissingElementScores(_)));
    }

    #[test]
    fn unlabeled_sample_has_no_target() {
        let mut s = sample("s1", Split::Test);
        s.total_score = None;
        let r = build_total_instruction(&s, None, &BuildOptions::default()).unwrap();
        assert_eq!(r.target_label, None);
        assert_eq!(r.to_corpus_line().messages.len(), 2);
    }

    #[test]
    fn element_record_examples() {
        let s = sample("s1", Split::Train);
        let dog = s.element("dog (animal)").unwrap();
        let r = build_element_instruction(&s, dog, &BuildOptions::default()).unwrap();
        assert_eq!(r.target_label, Some('7'));
        assert_eq!(r.element_name.as_deref(), Some("dog (animal)"));
        assert!(r.user_text.ends_with("Answer with a single digit from 1 to 7."));

        let mut unlabeled = s.clone();
        unlabeled.elements[0].score = None;
        let r = build_element_instruction(&unlabeled, &unlabeled.elements[0], &BuildOptions::default()).unwrap();
        assert_eq!(r.target_label, None);
    }

    #[test]
    fn element_record_golden_with_prompt_type() {
        let mut s = sample("s1", Split::Train);
        s.prompt_type = PromptType::Synthetic;
        let opts = BuildOptions {
            include_prompt_type: true,
            include_confidences: true,
            ..Default::default()
        };
        let r = build_element_instruction(&s, &s.elements[1], &opts).unwrap();
        let golden = "You are given an image and the prompt used to generate it.\n\
                      Prompt: a dog chasing a red ball\n\
                      Prompt type: synthetic\n\
                      Meaninglessness: 0.10; Split confidence: 0.90; Attribute confidence: 0.75\n\
                      Element: ball (object)\n\
                      Rate how well this element is depicted in the image, from 1 (absent) to 7 (perfect). Answer with a single digit from 1 to 7.";
        assert_eq!(r.user_text, golden);
        assert!(r.user_text.to_lowercase().contains("prompt type: synthetic"));
        assert_eq!(r.target_label, Some('4'));
    }

    #[test]
    fn unknown_element_is_an_error() {
        let s = sample("s1", Split::Train);
        let stranger = ElementAnnotation::new("cat", "animal", Some(0.5));
        assert!(matches!(
            build_element_instruction(&s, &stranger, &BuildOptions::default()),
            Err(InstructionError::UnknownElement { .. })
        ));
    }

    #[test]
    fn toggles_are_observable() {
        let s = sample("s1", Split::Train);
        let off = BuildOptions::default();
        for e in &s.elements {
            let text = build_element_instruction(&s, e, &off).unwrap().user_text;
            assert!(!text.to_lowercase().contains("prompt type:"));
            assert!(!text.contains("Meaninglessness"));
        }
        let text = build_total_instruction(&s, None, &off).unwrap().user_text;
        assert!(!text.contains("Element ratings"));
    }

    #[test]
    fn perturbation_identity_and_clamping() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(perturb_element_label(cat(4), 0, &mut rng), cat(4));
        for _ in 0..200 {
            let up = perturb_element_label(cat(7), 1, &mut rng).digit();
            assert!(up == 6 || up == 7);
            let down = perturb_element_label(cat(1), 1, &mut rng).digit();
            assert!(down == 1 || down == 2);
        }
    }

    #[test]
    fn perturbation_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let ups = (0..n)
            .filter(|_| perturb_element_label(cat(4), 1, &mut rng).digit() == 5)
            .count();
        let freq = ups as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.05, "{freq}");
        // chi-squared, one degree of freedom, 5% critical value 3.841
        let expected = n as f64 / 2.0;
        let downs = n - ups;
        let chi2 = ((ups as f64 - expected).powi(2) + (downs as f64 - expected).powi(2)) / expected;
        assert!(chi2 < 3.841, "chi2 = {chi2}");
    }

    #[test]
    fn epsilon_above_six_is_rejected() {
        let opts = BuildOptions {
            perturbation_epsilon: 7,
            ..Default::default()
        };
        let s = sample("s1", Split::Train);
        assert!(matches!(
            build_element_instruction(&s, &s.elements[0], &opts),
            Err(InstructionError::InvalidOptions(_))
        ));
    }

    fn ten_samples() -> DatasetSplit {
        DatasetSplit::from_samples((0..10).map(|i| sample(&format!("s{i}"), Split::Train)))
    }

    #[test]
    fn corpus_counts() {
        let split = ten_samples();
        let dir = tempfile::tempdir().unwrap();
        let total = build_training_corpus(&split, Task::Total, &BuildOptions::default(), dir.path().join("t.jsonl")).unwrap();
        assert_eq!(total, 10);
        let element = build_training_corpus(&split, Task::Element, &BuildOptions::default(), dir.path().join("e.jsonl")).unwrap();
        assert_eq!(element, 30);
        let lines = std::fs::read_to_string(dir.path().join("e.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 30);
        let first: CorpusLine = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first.messages[2].role, "assistant");
        assert_eq!(first.messages[2].content.chars().count(), 1);
    }

    #[test]
    fn corpus_is_deterministic_given_seed() {
        let split = ten_samples();
        let opts = BuildOptions {
            perturbation_epsilon: 1,
            include_prompt_type: true,
            seed: 99,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        build_training_corpus(&split, Task::Element, &opts, &a).unwrap();
        build_training_corpus(&split, Task::Element, &opts, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn emitted_labels_stay_in_alphabet() {
        let split = ten_samples();
        for eps in 0..=MAX_PERTURBATION {
            let opts = BuildOptions {
                perturbation_epsilon: eps,
                seed: eps as u64,
                ..Default::default()
            };
            for r in render_corpus(&split, Task::Element, &opts).unwrap() {
                assert!(('1'..='7').contains(&r.target_label.unwrap()));
            }
        }
        for r in render_corpus(&split, Task::Total, &BuildOptions::default()).unwrap() {
            assert!(('a'..='o').contains(&r.target_label.unwrap()));
        }
    }
}
