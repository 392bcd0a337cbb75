//! The model as a closed-set logit provider.
//!
//! A [`Backend`] reports scores for the candidate labels of a rendered
//! query; everything downstream (softmax, expectation, thresholding) lives
//! on this side of the boundary so every backend is calibrated the same way.

mod http;
mod mock;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SamplePair;
use crate::instruction::{
    build_element_instruction, build_total_instruction, BuildOptions, InstructionError,
    InstructionRecord, Task,
};
use crate::score_codec::{
    category_to_hit, closed_set_softmax, expected_element_category, expected_total_score,
    Alphabet, CodecError, Distribution, ElementCategory, LogitVector,
};
use crate::seeding::hex_digest;

pub use http::{HttpBackend, HttpConfig, ImageMode};
pub use mock::{write_table, MockBackend, TableEntry};

/// Gap below the lowest reported logit given to labels a backend omitted.
pub const MISSING_LABEL_GAP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("label `{0}` cannot be resolved to a single token")]
    UnresolvableLabel(String),
    #[error("no recorded response for request {0}")]
    NotRecorded(String),
    #[error("{0}")]
    Io(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unreachable { .. } | BackendError::Timeout { .. })
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("sample `{0}` has no elements")]
    NoElements(String),
    #[error("concurrency limit must be at least 1")]
    Concurrency,
}

/// What a backend is asked: score these labels as the next token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendRequest {
    pub system_text: String,
    pub user_text: String,
    pub image_ref: String,
    pub alphabet: Alphabet,
}

impl BackendRequest {
    pub fn from_instruction(record: &InstructionRecord) -> Self {
        Self {
            system_text: record.system_text.clone(),
            user_text: record.user_text.clone(),
            image_ref: record.image_ref.clone(),
            alphabet: match record.task {
                Task::Total => Alphabet::Rating,
                Task::Element => Alphabet::Element,
            },
        }
    }

    pub fn labels(&self) -> &'static [char] {
        self.alphabet.labels()
    }

    /// Content key used by recorded-response tables.
    pub fn hash(&self) -> String {
        let labels: String = self.labels().iter().collect();
        hex_digest(&[&self.system_text, &self.user_text, &self.image_ref, &labels])
    }
}

/// Any model endpoint able to score candidate next tokens.
pub trait Backend: Send + Sync {
    /// Scores for whichever requested labels the backend reports. Labels it
    /// did not report may be absent from the map.
    fn label_scores(&self, request: &BackendRequest) -> Result<HashMap<char, f64>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn label_scores(&self, request: &BackendRequest) -> Result<HashMap<char, f64>, BackendError> {
        (**self).label_scores(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn label_scores(&self, request: &BackendRequest) -> Result<HashMap<char, f64>, BackendError> {
        (**self).label_scores(request)
    }
}

/// One finite logit per label of the request alphabet. Labels the backend
/// did not report get `min(reported) - MISSING_LABEL_GAP`.
pub fn query_closed_set_logits<B: Backend + ?Sized>(
    backend: &B,
    request: &BackendRequest,
) -> Result<LogitVector, BackendError> {
    let scores = backend.label_scores(request)?;
    let labels = request.labels();
    let reported: Vec<Option<f64>> = labels.iter().map(|l| scores.get(l).copied()).collect();
    if let Some(bad) = reported.iter().flatten().find(|v| !v.is_finite()) {
        return Err(BackendError::Malformed(format!("non-finite label score {bad}")));
    }
    let floor = reported
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min)
        - MISSING_LABEL_GAP;
    if !floor.is_finite() {
        return Err(BackendError::Malformed(format!(
            "none of the {} labels were reported",
            request.alphabet
        )));
    }
    let values = reported.into_iter().map(|v| v.unwrap_or(floor)).collect();
    LogitVector::new(request.alphabet, values).map_err(|e| BackendError::Malformed(e.to_string()))
}

/// A calibrated model output for one sample (or one element of it).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub task: Task,
    pub element_name: Option<String>,
    /// `[1, 5]` for the total task, `[1, 7]` for the element task.
    pub continuous_score: f64,
    pub argmax_label: char,
    pub distribution: Distribution,
}

impl Prediction {
    /// Argmax digit of an element prediction.
    pub fn argmax_category(&self) -> Option<ElementCategory> {
        ElementCategory::from_label(self.argmax_label)
    }
}

/// How an element prediction becomes a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitMode {
    /// Threshold the most probable category.
    #[default]
    Argmax,
    /// Threshold the expected category.
    Expected,
}

impl std::str::FromStr for HitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(HitMode::Argmax),
            "expected" => Ok(HitMode::Expected),
            other => Err(format!("unknown hit mode `{other}`")),
        }
    }
}

pub fn element_hit(prediction: &Prediction, tau: u8, mode: HitMode) -> bool {
    match mode {
        HitMode::Argmax => prediction
            .argmax_category()
            .map(|c| category_to_hit(c, tau))
            .unwrap_or(false),
        HitMode::Expected => prediction.continuous_score > tau as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementPrediction {
    pub prediction: Prediction,
    pub hit: bool,
}

fn predict(
    backend: &(impl Backend + ?Sized),
    record: &InstructionRecord,
) -> Result<Prediction, InferenceError> {
    let request = BackendRequest::from_instruction(record);
    let logits = query_closed_set_logits(backend, &request)?;
    let distribution = closed_set_softmax(&logits);
    let continuous_score = match record.task {
        Task::Total => expected_total_score(&logits)?,
        Task::Element => expected_element_category(&logits)?,
    };
    Ok(Prediction {
        sample_id: record.sample_id.clone(),
        task: record.task,
        element_name: record.element_name.clone(),
        continuous_score,
        argmax_label: distribution.argmax_label(),
        distribution,
    })
}

/// Overall score: render the total query, score the fifteen letters, take
/// the calibrated expectation.
pub fn predict_total_score(
    backend: &(impl Backend + ?Sized),
    sample: &SamplePair,
    element_scores: Option<&BTreeMap<String, ElementCategory>>,
    opts: &BuildOptions,
) -> Result<Prediction, InferenceError> {
    let record = build_total_instruction(sample, element_scores, opts)?;
    predict(backend, &record)
}

/// One prediction per element, ordered by element name.
pub fn predict_element_scores(
    backend: &(impl Backend + ?Sized),
    sample: &SamplePair,
    tau: u8,
    mode: HitMode,
    opts: &BuildOptions,
) -> Result<Vec<ElementPrediction>, InferenceError> {
    if sample.elements.is_empty() {
        return Err(InferenceError::NoElements(sample.sample_id.clone()));
    }
    sample
        .sorted_elements()
        .into_iter()
        .map(|element| {
            let record = build_element_instruction(sample, element, opts)?;
            let prediction = predict(backend, &record)?;
            let hit = element_hit(&prediction, tau, mode);
            Ok(ElementPrediction { prediction, hit })
        })
        .collect()
}

/// Maps `f` over `items` with at most `concurrency` calls in flight;
/// results keep input order. The first error aborts the batch.
pub fn map_bounded<T, R, E, F>(concurrency: usize, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send + From<InferenceError>,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    if concurrency == 0 {
        return Err(InferenceError::Concurrency.into());
    }
    if concurrency == 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .map_err(|_| InferenceError::Concurrency)?;
    pool.install(|| items.par_iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::sample;
    use crate::dataset::Split;
    use approx::assert_abs_diff_eq;

    struct Partial(Vec<(char, f64)>);

    impl Backend for Partial {
        fn label_scores(&self, _: &BackendRequest) -> Result<HashMap<char, f64>, BackendError> {
            Ok(self.0.iter().copied().collect())
        }
    }

    fn rating_request() -> BackendRequest {
        BackendRequest {
            system_text: "s".into(),
            user_text: "u".into(),
            image_ref: "i.png".into(),
            alphabet: Alphabet::Rating,
        }
    }

    #[test]
    fn missing_labels_get_floor_logit() {
        let reported = vec![('a', -1.0), ('c', -2.5), ('h', -0.5), ('n', -3.0), ('o', -0.2)];
        let logits = query_closed_set_logits(&Partial(reported.clone()), &rating_request()).unwrap();
        let floor = -3.0 - MISSING_LABEL_GAP;
        for (i, label) in Alphabet::Rating.labels().iter().enumerate() {
            let expected = reported
                .iter()
                .find(|(l, _)| l == label)
                .map(|(_, v)| *v)
                .unwrap_or(floor);
            assert_eq!(logits.values()[i], expected, "label {label}");
        }
        assert_eq!(logits.values().iter().filter(|&&v| v == floor).count(), 10);
    }

    #[test]
    fn foreign_labels_are_ignored() {
        let logits = query_closed_set_logits(&Partial(vec![('z', 5.0), ('b', 1.0)]), &rating_request()).unwrap();
        assert_eq!(logits.values()[1], 1.0);
        assert_eq!(logits.values()[0], 1.0 - MISSING_LABEL_GAP);
    }

    #[test]
    fn no_reported_labels_is_malformed() {
        let err = query_closed_set_logits(&Partial(vec![('z', 1.0)]), &rating_request()).unwrap_err();
        assert!(matches!(err, BackendError::Malformed(_)));
        assert!(!err.is_retryable());
        let err = query_closed_set_logits(&Partial(vec![('a', f64::NAN)]), &rating_request()).unwrap_err();
        assert!(matches!(err, BackendError::Malformed(_)));
    }

    #[test]
    fn request_hash_covers_every_field() {
        let base = rating_request();
        let mut other = base.clone();
        other.alphabet = Alphabet::Element;
        assert_ne!(base.hash(), other.hash());
        let mut other = base.clone();
        other.user_text.push(' ');
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash(), rating_request().hash());
    }

    #[test]
    fn uniform_backend_predicts_midpoint() {
        let backend = MockBackend::constant(Alphabet::Rating.labels().iter().map(|&l| (l, 0.0)));
        let p = predict_total_score(&backend, &sample("s", Split::Test), None, &BuildOptions::default()).unwrap();
        assert_eq!(p.continuous_score, 3.0);
        assert_eq!(p.task, Task::Total);
    }

    #[test]
    fn delta_backend_predicts_top() {
        let backend = MockBackend::constant(
            Alphabet::Rating
                .labels()
                .iter()
                .map(|&l| (l, if l == 'o' { 0.0 } else { -1e3 })),
        );
        let p = predict_total_score(&backend, &sample("s", Split::Test), None, &BuildOptions::default()).unwrap();
        assert_abs_diff_eq!(p.continuous_score, 5.0, epsilon = 1e-6);
        assert_eq!(p.argmax_label, 'o');
    }

    #[test]
    fn prediction_is_shift_invariant() {
        let base: Vec<(char, f64)> = Alphabet::Rating
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, (i as f64 * 0.7).sin() * 3.0))
            .collect();
        let shifted: Vec<(char, f64)> = base.iter().map(|&(l, v)| (l, v + 123.0)).collect();
        let s = sample("s", Split::Test);
        let a = predict_total_score(&MockBackend::constant(base), &s, None, &BuildOptions::default()).unwrap();
        let b = predict_total_score(&MockBackend::constant(shifted), &s, None, &BuildOptions::default()).unwrap();
        assert!((a.continuous_score - b.continuous_score).abs() <= 1e-9);
    }

    #[test]
    fn element_hits_follow_threshold() {
        let s = sample("s", Split::Test);
        let seven = MockBackend::constant([('7', 0.0)]);
        let preds = predict_element_scores(&seven, &s, 3, HitMode::Argmax, &BuildOptions::default()).unwrap();
        assert!(preds.iter().all(|p| p.hit));

        let three = MockBackend::constant([('3', 0.0)]);
        let preds = predict_element_scores(&three, &s, 3, HitMode::Argmax, &BuildOptions::default()).unwrap();
        assert!(preds.iter().all(|p| !p.hit));
        let names: Vec<_> = preds
            .iter()
            .map(|p| p.prediction.element_name.clone().unwrap())
            .collect();
        assert_eq!(names, ["ball (object)", "dog (animal)", "red (attribute)"]);
    }

    #[test]
    fn expected_mode_thresholds_the_expectation() {
        // mass split between 3 and 5 -> argmax 3 (first), expectation 4
        let backend = MockBackend::constant([('3', 0.0), ('5', 0.0)]);
        let s = sample("s", Split::Test);
        let argmax = predict_element_scores(&backend, &s, 3, HitMode::Argmax, &BuildOptions::default()).unwrap();
        let expected = predict_element_scores(&backend, &s, 3, HitMode::Expected, &BuildOptions::default()).unwrap();
        assert!(!argmax[0].hit);
        assert!(expected[0].hit);
    }

    #[test]
    fn elementless_sample_is_rejected() {
        let mut s = sample("s", Split::Test);
        s.elements.clear();
        let backend = MockBackend::constant([('4', 0.0)]);
        assert!(matches!(
            predict_element_scores(&backend, &s, 3, HitMode::Argmax, &BuildOptions::default()),
            Err(InferenceError::NoElements(_))
        ));
    }

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<u32> = (0..200).collect();
        let out: Vec<u32> = map_bounded(4, &items, |&x| Ok::<_, InferenceError>(x * 2)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(map_bounded(0, &items, |&x| Ok::<_, InferenceError>(x)).is_err());
    }
}
