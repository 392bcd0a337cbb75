//! Multi-stage workflows: pseudo-labeling the validation split, the
//! element→total two-stage prediction, ensembling of prediction runs, and
//! evaluation of prediction files against a labeled split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::{DatasetSplit, SamplePair, Split};
use crate::inference::{
    map_bounded, predict_element_scores, predict_total_score, Backend, ElementPrediction, HitMode,
    InferenceError, Prediction,
};
use crate::instruction::{BuildOptions, Task};
use crate::metrics::{MetricsError, MetricsReport};
use crate::score_codec::{
    category_to_hit, decode_element_category, encode_element_score, round_half_away, Alphabet,
    CodecError, Distribution, ElementCategory, DEFAULT_TAU,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("validation split is empty; nothing to pseudo-label")]
    EmptyValidation,
    #[error("sample_id `{0}` appears in both inputs")]
    IdCollision(String),
    #[error("run {run} covers a different set than run 0: only in run 0 {only_first:?}, only in run {run} {only_other:?}")]
    Coverage {
        run: usize,
        only_first: Vec<String>,
        only_other: Vec<String>,
    },
    #[error("duplicate key `{0}` within one run")]
    DuplicateKey(String),
    #[error("invalid ensemble spec: {0}")]
    Spec(String),
    #[error("prediction for `{0}` has no labeled sample")]
    Unmatched(String),
}

/// Knobs shared by the prediction workflows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub build: BuildOptions,
    pub tau: u8,
    pub hit_mode: HitMode,
    pub concurrency: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            build: BuildOptions::default(),
            tau: DEFAULT_TAU,
            hit_mode: HitMode::Argmax,
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRecord {
    pub sample: SamplePair,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabeledSet {
    pub records: Vec<PseudoRecord>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn predicted_categories(preds: &[ElementPrediction]) -> BTreeMap<String, ElementCategory> {
    preds
        .iter()
        .filter_map(|p| {
            let name = p.prediction.element_name.clone()?;
            Some((name, p.prediction.argmax_category()?))
        })
        .collect()
}

/// Labels every validation sample with model predictions. With
/// `label_elements`, element scores are replaced by the expected predicted
/// category mapped back onto `[0, 1]`. Any backend failure aborts the run.
pub fn pseudo_label_validation(
    backend: &(impl Backend + ?Sized),
    split: &DatasetSplit,
    opts: &RunOptions,
    label_elements: bool,
) -> Result<PseudoLabeledSet, PipelineError> {
    if split.validation.is_empty() {
        return Err(PipelineError::EmptyValidation);
    }
    let need_elements = label_elements || opts.build.include_elements;
    let records = map_bounded(opts.concurrency, &split.validation, |sample| {
        let element_preds = if need_elements && !sample.elements.is_empty() {
            predict_element_scores(backend, sample, opts.tau, opts.hit_mode, &opts.build)?
        } else {
            Vec::new()
        };
        let categories = predicted_categories(&element_preds);
        let total = predict_total_score(backend, sample, Some(&categories), &opts.build)?;

        let mut labeled = sample.clone();
        labeled.total_score = Some(total.continuous_score);
        if label_elements {
            for p in &element_preds {
                let name = p.prediction.element_name.as_deref().unwrap_or_default();
                if let Some(e) = labeled.elements.iter_mut().find(|e| e.element_name == name) {
                    e.score = Some(decode_element_category(p.prediction.continuous_score).clamp(0.0, 1.0));
                    e.hit = None;
                }
            }
        }
        Ok::<_, PipelineError>(PseudoRecord {
            sample: labeled,
            provenance: Provenance::Pseudo,
        })
    })?;
    log::info!("pseudo-labeled {} validation samples", records.len());
    Ok(PseudoLabeledSet { records })
}

fn tag(sample: &mut SamplePair, provenance: Provenance) {
    sample.extra.insert(
        "provenance".into(),
        serde_json::to_value(provenance).expect("enum serializes"),
    );
}

/// Concatenates the training list with the pseudo-labeled records, moving
/// the latter into the train split. Provenance is recorded on every sample
/// under the `provenance` key.
pub fn merge_training_sets(
    train: &[SamplePair],
    pseudo: &PseudoLabeledSet,
) -> Result<DatasetSplit, PipelineError> {
    let mut ids: HashSet<&str> = HashSet::new();
    for s in train.iter().chain(pseudo.records.iter().map(|r| &r.sample)) {
        if !ids.insert(&s.sample_id) {
            return Err(PipelineError::IdCollision(s.sample_id.clone()));
        }
    }
    let mut merged = Vec::with_capacity(train.len() + pseudo.len());
    for s in train {
        let mut s = s.clone();
        if !s.extra.contains_key("provenance") {
            tag(&mut s, Provenance::GroundTruth);
        }
        merged.push(s);
    }
    for r in &pseudo.records {
        let mut s = r.sample.clone();
        s.split = Split::Train;
        tag(&mut s, r.provenance);
        merged.push(s);
    }
    Ok(DatasetSplit {
        train: merged,
        ..DatasetSplit::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutput {
    /// Stage-one predictions, grouped by sample and ordered by element name.
    pub elements: Vec<ElementPrediction>,
    pub totals: Vec<Prediction>,
}

/// Stage one predicts element categories; stage two embeds the argmax
/// categories in the total query. Samples without elements go through
/// stage two with the element section omitted.
pub fn two_stage_predict(
    element_backend: &(impl Backend + ?Sized),
    total_backend: &(impl Backend + ?Sized),
    samples: &[SamplePair],
    opts: &RunOptions,
) -> Result<TwoStageOutput, PipelineError> {
    let stage_one = map_bounded(opts.concurrency, samples, |sample| {
        if sample.elements.is_empty() {
            Ok(Vec::new())
        } else {
            predict_element_scores(element_backend, sample, opts.tau, opts.hit_mode, &opts.build)
                .map_err(PipelineError::from)
        }
    })?;
    log::info!("stage one: {} element predictions", stage_one.iter().map(Vec::len).sum::<usize>());

    let build = BuildOptions {
        include_elements: true,
        ..opts.build
    };
    let indexed: Vec<(usize, &SamplePair)> = samples.iter().enumerate().collect();
    let totals = map_bounded(opts.concurrency, &indexed, |&(i, sample)| {
        let categories = predicted_categories(&stage_one[i]);
        predict_total_score(total_backend, sample, Some(&categories), &build).map_err(PipelineError::from)
    })?;
    log::info!("stage two: {} total predictions", totals.len());

    Ok(TwoStageOutput {
        elements: stage_one.into_iter().flatten().collect(),
        totals,
    })
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_name: Option<String>,
    pub continuous_score: f64,
    pub argmax_label: String,
    pub probabilities: Vec<f64>,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        Self {
            sample_id: p.sample_id.clone(),
            task: p.task,
            element_name: p.element_name.clone(),
            continuous_score: p.continuous_score,
            argmax_label: p.argmax_label.to_string(),
            probabilities: p.distribution.probabilities().to_vec(),
        }
    }
}

impl TryFrom<PredictionRecord> for Prediction {
    type Error = String;

    fn try_from(r: PredictionRecord) -> Result<Self, Self::Error> {
        let alphabet = match r.task {
            Task::Total => Alphabet::Rating,
            Task::Element => Alphabet::Element,
        };
        let mut chars = r.argmax_label.chars();
        let argmax_label = match (chars.next(), chars.next()) {
            (Some(c), None) if alphabet.position(c).is_some() => c,
            _ => return Err(format!("argmax_label `{}` not in the {alphabet} alphabet", r.argmax_label)),
        };
        let distribution = Distribution::new(alphabet, r.probabilities).map_err(|e| e.to_string())?;
        if !r.continuous_score.is_finite() {
            return Err("continuous_score is not finite".into());
        }
        Ok(Prediction {
            sample_id: r.sample_id,
            task: r.task,
            element_name: r.element_name,
            continuous_score: r.continuous_score,
            argmax_label,
            distribution,
        })
    }
}

pub fn write_predictions<'a>(
    path: impl AsRef<Path>,
    predictions: impl IntoIterator<Item = &'a Prediction>,
) -> Result<usize, PipelineError> {
    let path = path.as_ref();
    let wrap = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    let mut count = 0;
    for p in predictions {
        serde_json::to_writer(&mut out, &PredictionRecord::from(p)).map_err(|e| wrap(e.into()))?;
        out.write_all(b"\n").map_err(wrap)?;
        count += 1;
    }
    out.flush().map_err(wrap)?;
    Ok(count)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, PipelineError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| PipelineError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(Prediction::try_from(record).map_err(parse_err)?);
    }
    Ok(out)
}

/// Prediction runs to combine, per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub total_runs: Vec<PathBuf>,
    pub element_runs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_weights: Option<Vec<f64>>,
}

pub fn check_weights(weights: &[f64], runs: usize) -> Result<(), PipelineError> {
    if weights.len() != runs {
        return Err(PipelineError::Spec(format!("{} weights for {runs} runs", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(PipelineError::Spec("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PipelineError::Spec(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.total_runs.is_empty() || self.element_runs.is_empty() {
            return Err(PipelineError::Spec("need at least one run per task".into()));
        }
        if let Some(w) = &self.total_weights {
            check_weights(w, self.total_runs.len())?;
        }
        if let Some(w) = &self.element_weights {
            check_weights(w, self.element_runs.len())?;
        }
        Ok(())
    }

    /// Reads an ensemble file; relative run paths resolve against its
    /// directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for run in spec.total_runs.iter_mut().chain(spec.element_runs.iter_mut()) {
            if run.is_relative() {
                *run = base.join(&*run);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn prediction_key(p: &Prediction) -> String {
    match &p.element_name {
        Some(name) => format!("{}\u{1f}{}", p.sample_id, name),
        None => p.sample_id.clone(),
    }
}

fn display_key(key: &str) -> String {
    key.replace('\u{1f}', "/")
}

/// Running weighted mean; zero weights contribute nothing and identical
/// inputs reproduce the input exactly.
#[derive(Debug, Default)]
struct WeightedMean {
    weight: f64,
    mean: f64,
}

impl WeightedMean {
    fn push(&mut self, x: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        self.weight += w;
        self.mean += (w / self.weight) * (x - self.mean);
    }
}

/// Per-key weighted combination of prediction runs. Continuous scores and
/// distributions are averaged; the argmax label is the mixture's argmax.
/// Output follows the order of the first run.
pub fn ensemble_predictions(
    runs: &[Vec<Prediction>],
    weights: Option<&[f64]>,
) -> Result<Vec<Prediction>, PipelineError> {
    let Some(first) = runs.first() else {
        return Err(PipelineError::Spec("no runs to ensemble".into()));
    };
    let uniform = vec![1.0; runs.len()];
    let weights = match weights {
        Some(w) => {
            check_weights(w, runs.len())?;
            w
        }
        None => &uniform,
    };

    let mut indexed: Vec<HashMap<String, &Prediction>> = Vec::with_capacity(runs.len());
    for run in runs {
        let mut map = HashMap::with_capacity(run.len());
        for p in run {
            let key = prediction_key(p);
            if map.insert(key.clone(), p).is_some() {
                return Err(PipelineError::DuplicateKey(display_key(&key)));
            }
        }
        indexed.push(map);
    }
    let reference: BTreeSet<&String> = indexed[0].keys().collect();
    for (run, map) in indexed.iter().enumerate().skip(1) {
        let other: BTreeSet<&String> = map.keys().collect();
        if other != reference {
            return Err(PipelineError::Coverage {
                run,
                only_first: reference.difference(&other).map(|k| display_key(k)).collect(),
                only_other: other.difference(&reference).map(|k| display_key(k)).collect(),
            });
        }
    }

    first
        .iter()
        .map(|head| {
            let key = prediction_key(head);
            let members: Vec<&Prediction> = indexed.iter().map(|m| m[&key]).collect();
            let alphabet = head.distribution.alphabet();
            if let Some(bad) = members.iter().find(|p| p.task != head.task) {
                return Err(PipelineError::Spec(format!(
                    "`{}` is a {} prediction in one run and {} in another",
                    display_key(&key),
                    head.task,
                    bad.task
                )));
            }

            let mut score = WeightedMean::default();
            let mut probs: Vec<WeightedMean> = (0..alphabet.len()).map(|_| WeightedMean::default()).collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (p, &w) in members.iter().zip(weights) {
                score.push(p.continuous_score, w);
                lo = lo.min(p.continuous_score);
                hi = hi.max(p.continuous_score);
                for (acc, &q) in probs.iter_mut().zip(p.distribution.probabilities()) {
                    acc.push(q, w);
                }
            }
            let distribution = Distribution::new(alphabet, probs.into_iter().map(|m| m.mean).collect())?;
            Ok(Prediction {
                sample_id: head.sample_id.clone(),
                task: head.task,
                element_name: head.element_name.clone(),
                continuous_score: score.mean.clamp(lo, hi),
                argmax_label: distribution.argmax_label(),
                distribution,
            })
        })
        .collect()
}

/// Weighted mean of the runs' continuous total scores, per sample.
pub fn ensemble_total(
    runs: &[Vec<Prediction>],
    weights: Option<&[f64]>,
) -> Result<Vec<(String, f64)>, PipelineError> {
    Ok(ensemble_predictions(runs, weights)?
        .into_iter()
        .map(|p| (p.sample_id, p.continuous_score))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementDecision {
    pub sample_id: String,
    pub element_name: String,
    pub mean_category: f64,
    pub hit: bool,
}

/// Averages the runs' expected categories, rounds half away from zero and
/// thresholds the rounded category at `tau`.
pub fn ensemble_elements(
    runs: &[Vec<Prediction>],
    weights: Option<&[f64]>,
    tau: u8,
) -> Result<Vec<ElementDecision>, PipelineError> {
    ensemble_predictions(runs, weights)?
        .into_iter()
        .map(|p| {
            let category = ElementCategory::clamped(round_half_away(p.continuous_score) as i32);
            Ok(ElementDecision {
                element_name: p.element_name.clone().unwrap_or_default(),
                sample_id: p.sample_id,
                mean_category: p.continuous_score,
                hit: category_to_hit(category, tau),
            })
        })
        .collect()
}

/// How element predictions become hits during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalHitMode {
    #[default]
    Argmax,
    Expected,
    /// Round the expected category first; matches [`ensemble_elements`].
    Rounded,
}

impl std::str::FromStr for EvalHitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(EvalHitMode::Argmax),
            "expected" => Ok(EvalHitMode::Expected),
            "rounded" => Ok(EvalHitMode::Rounded),
            other => Err(format!("unknown hit mode `{other}`")),
        }
    }
}

fn eval_hit(p: &Prediction, tau: u8, mode: EvalHitMode) -> bool {
    match mode {
        EvalHitMode::Argmax => crate::inference::element_hit(p, tau, HitMode::Argmax),
        EvalHitMode::Expected => crate::inference::element_hit(p, tau, HitMode::Expected),
        EvalHitMode::Rounded => {
            category_to_hit(ElementCategory::clamped(round_half_away(p.continuous_score) as i32), tau)
        }
    }
}

/// Scores prediction files against ground truth. Element accuracy pools
/// every (sample, element) pair.
pub fn evaluate_predictions(
    samples: &[SamplePair],
    totals: &[Prediction],
    elements: &[Prediction],
    tau: u8,
    mode: EvalHitMode,
) -> Result<MetricsReport, PipelineError> {
    let by_id: HashMap<&str, &SamplePair> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();

    let mut pred_totals = Vec::with_capacity(totals.len());
    let mut true_totals = Vec::with_capacity(totals.len());
    for p in totals {
        let truth = by_id
            .get(p.sample_id.as_str())
            .and_then(|s| s.total_score)
            .ok_or_else(|| PipelineError::Unmatched(p.sample_id.clone()))?;
        pred_totals.push(p.continuous_score);
        true_totals.push(truth);
    }

    let mut pred_hits = Vec::with_capacity(elements.len());
    let mut true_hits = Vec::with_capacity(elements.len());
    for p in elements {
        let name = p.element_name.as_deref().unwrap_or_default();
        let score = by_id
            .get(p.sample_id.as_str())
            .and_then(|s| s.element(name))
            .and_then(|e| e.score)
            .ok_or_else(|| PipelineError::Unmatched(format!("{}/{name}", p.sample_id)))?;
        pred_hits.push(eval_hit(p, tau, mode));
        true_hits.push(category_to_hit(encode_element_score(score)?, tau));
    }

    Ok(MetricsReport::compute(&pred_totals, &true_totals, &pred_hits, &true_hits)?)
}

/// Writes a report as one flat JSON object.
pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let wrap = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = serde_json::to_string(report).map_err(|e| wrap(e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(wrap)
}

/// Prediction records also round-trip through plain JSON values, which is
/// what downstream tooling usually wants.
pub fn prediction_to_value(p: &Prediction) -> Value {
    serde_json::to_value(PredictionRecord::from(p)).expect("record serializes")
}
