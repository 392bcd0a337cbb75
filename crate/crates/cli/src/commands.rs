use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use tialign_core::dataset::{export_dataset, load_dataset, DatasetSplit, Split};
use tialign_core::image_augment::{augment_subset, DEFAULT_FRACTION};
use tialign_core::inference::{
    map_bounded, predict_element_scores, predict_total_score, HttpBackend, HttpConfig, ImageMode,
    MockBackend,
};
use tialign_core::instruction::{build_training_corpus, ground_truth_categories, Task};
use tialign_core::pipeline::{
    ensemble_elements, ensemble_predictions, evaluate_predictions, merge_training_sets,
    pseudo_label_validation, read_predictions, two_stage_predict, write_predictions, write_report,
    EnsembleSpec, PipelineError,
};
use tialign_core::{Backend, Prediction};

use crate::config::{BackendKind, RunConfig};
use crate::error::{io, CliError, EXIT_DOMAIN, EXIT_OK};

fn output_path(config: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    let dir = config.output_dir();
    std::fs::create_dir_all(&dir).map_err(io(format!("cannot create {}", dir.display())))?;
    Ok(dir.join(name))
}

fn load(config: &RunConfig) -> Result<DatasetSplit, CliError> {
    let path = config.dataset_path()?;
    let (split, report) = load_dataset(path, true)?;
    log::info!(
        "loaded {} records from {} ({} train, {} validation, {} test)",
        report.records_read,
        path.display(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(split)
}

/// Stage-one backends may override the endpoint, model and mock table.
fn make_backend(config: &RunConfig, element_stage: bool) -> Result<Box<dyn Backend>, CliError> {
    let pick = |stage: &Option<String>, main: &Option<String>| {
        if element_stage { stage.clone().or_else(|| main.clone()) } else { main.clone() }
    };
    match config.backend.unwrap_or_default() {
        BackendKind::Mock => {
            let table = if element_stage {
                config.element_mock_table.as_ref().or(config.mock_table.as_ref())
            } else {
                config.mock_table.as_ref()
            };
            Ok(match table {
                Some(path) => {
                    log::info!("mock backend replaying {}", path.display());
                    Box::new(MockBackend::from_file(path).map_err(tialign_core::inference::InferenceError::from)?)
                }
                None => {
                    log::info!("mock backend with seeded logits (seed {})", config.seed());
                    Box::new(MockBackend::seeded(config.seed()))
                }
            })
        }
        BackendKind::Http => {
            let endpoint = pick(&config.element_endpoint, &config.endpoint)
                .ok_or_else(|| CliError::Config("http backend needs `endpoint`".into()))?;
            let model = pick(&config.element_model, &config.model)
                .ok_or_else(|| CliError::Config("http backend needs `model`".into()))?;
            let image_mode = match &config.image_base_url {
                Some(base_url) => ImageMode::Url {
                    base_url: base_url.clone(),
                },
                None => ImageMode::InlineBase64 {
                    root: config.image_root(),
                },
            };
            let mut http = HttpConfig::new(endpoint, model, image_mode);
            http.timeout = config.timeout();
            if let Some(retries) = config.retries {
                http.retries = retries;
            }
            if let Some(k) = config.top_k {
                http.top_k = k;
            }
            if let Some(var) = &config.api_key_env {
                http.api_key = Some(
                    std::env::var(var).map_err(|_| CliError::Config(format!("environment variable {var} is not set")))?,
                );
            }
            log::info!("http backend at {} ({})", http.base_url, http.model);
            Ok(Box::new(HttpBackend::new(http)))
        }
    }
}

pub fn validate(config: &RunConfig) -> Result<u8, CliError> {
    let path = config.dataset_path()?;
    let (_, report) = load_dataset(path, false)?;
    for rejected in &report.rejected {
        let reasons: Vec<String> = rejected.violations.iter().map(ToString::to_string).collect();
        println!("line {} `{}`: {}", rejected.line, rejected.sample_id, reasons.join("; "));
    }
    println!(
        "{}: {} records, {} invalid",
        path.display(),
        report.records_read,
        report.violation_count()
    );
    Ok(if report.violation_count() == 0 { EXIT_OK } else { EXIT_DOMAIN })
}

pub fn build_corpus(config: &RunConfig, task: Task) -> Result<u8, CliError> {
    let split = load(config)?;
    let out = output_path(config, &format!("corpus-{task}.jsonl"))?;
    let count = build_training_corpus(&split, task, &config.build_options(), &out)?;
    log::info!("wrote {}", out.display());
    println!("{count}");
    Ok(EXIT_OK)
}

pub fn augment_images(config: &RunConfig) -> Result<u8, CliError> {
    let split = load(config)?;
    let fraction = config.augment_fraction.unwrap_or(DEFAULT_FRACTION);
    let out = augment_subset(&split, fraction, config.seed(), &config.image_root())?;
    let enlarged = DatasetSplit {
        train: out.final_train,
        ..split
    };
    let path = output_path(config, "augmented.jsonl")?;
    export_dataset(&enlarged, &path)?;
    log::info!("wrote {}", path.display());
    println!("{} augmented, {} train samples", out.augmented.len(), enlarged.train.len());
    Ok(EXIT_OK)
}

pub fn pseudo_label(config: &RunConfig, label_elements: bool) -> Result<u8, CliError> {
    let split = load(config)?;
    let backend = make_backend(config, false)?;
    let pseudo = pseudo_label_validation(&*backend, &split, &config.run_options(), label_elements)?;
    let merged = merge_training_sets(&split.train, &pseudo)?;
    let path = output_path(config, "train-merged.jsonl")?;
    export_dataset(&merged, &path)?;
    log::info!("wrote {}", path.display());
    println!("{} pseudo-labeled, {} train samples", pseudo.len(), merged.train.len());
    Ok(EXIT_OK)
}

fn save_predictions(config: &RunConfig, name: &str, predictions: &[Prediction]) -> Result<PathBuf, CliError> {
    let path = output_path(config, name)?;
    write_predictions(&path, predictions)?;
    log::info!("wrote {} predictions to {}", predictions.len(), path.display());
    Ok(path)
}

pub fn predict(config: &RunConfig, task: Task, split_name: Split) -> Result<u8, CliError> {
    let split = load(config)?;
    let samples = split.list(split_name);
    let backend = make_backend(config, task == Task::Element)?;
    let opts = config.run_options();
    let predictions: Vec<Prediction> = match task {
        Task::Total => map_bounded(opts.concurrency, samples, |s| {
            let categories = if opts.build.include_elements {
                Some(ground_truth_categories(s)?)
            } else {
                None
            };
            predict_total_score(&*backend, s, categories.as_ref(), &opts.build).map_err(CliError::from)
        })?,
        Task::Element => {
            let with_elements: Vec<_> = samples.iter().filter(|s| !s.elements.is_empty()).cloned().collect();
            map_bounded(opts.concurrency, &with_elements, |s| {
                predict_element_scores(&*backend, s, opts.tau, opts.hit_mode, &opts.build).map_err(CliError::from)
            })?
            .into_iter()
            .flatten()
            .map(|p| p.prediction)
            .collect()
        }
    };
    save_predictions(config, &format!("predictions-{task}.jsonl"), &predictions)?;
    println!("{}", predictions.len());
    Ok(EXIT_OK)
}

pub fn two_stage(config: &RunConfig, split_name: Split) -> Result<u8, CliError> {
    let split = load(config)?;
    let element_backend = make_backend(config, true)?;
    let total_backend = make_backend(config, false)?;
    let out = two_stage_predict(&*element_backend, &*total_backend, split.list(split_name), &config.run_options())?;
    let elements: Vec<Prediction> = out.elements.into_iter().map(|e| e.prediction).collect();
    save_predictions(config, "predictions-element.jsonl", &elements)?;
    save_predictions(config, "predictions-total.jsonl", &out.totals)?;
    println!("{} element, {} total predictions", elements.len(), out.totals.len());
    Ok(EXIT_OK)
}

fn read_runs(paths: &[PathBuf]) -> Result<Vec<Vec<Prediction>>, PipelineError> {
    paths.iter().map(read_predictions).collect()
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let context = format!("cannot write {}", path.display());
    let mut out = BufWriter::new(File::create(path).map_err(io(context.clone()))?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| CliError::Io {
            context: context.clone(),
            source: e.into(),
        })?;
        out.write_all(b"\n").map_err(io(context.clone()))?;
    }
    out.flush().map_err(io(context))
}

pub fn ensemble(config: &RunConfig) -> Result<u8, CliError> {
    let spec_path = config
        .ensemble_spec
        .as_deref()
        .ok_or_else(|| CliError::Config("no ensemble spec (positional argument or `ensemble_spec`)".into()))?;
    let spec = EnsembleSpec::from_file(spec_path)?;
    let total_runs = read_runs(&spec.total_runs)?;
    let element_runs = read_runs(&spec.element_runs)?;

    let totals = ensemble_predictions(&total_runs, spec.total_weights.as_deref())?;
    let elements = ensemble_predictions(&element_runs, spec.element_weights.as_deref())?;
    let hits = ensemble_elements(&element_runs, spec.element_weights.as_deref(), config.tau())?;

    save_predictions(config, "ensemble-total.jsonl", &totals)?;
    save_predictions(config, "ensemble-element.jsonl", &elements)?;
    let hits_path = output_path(config, "ensemble-element-hits.jsonl")?;
    write_lines(&hits_path, &hits)?;
    println!(
        "{} total runs, {} element runs; {} totals, {} elements",
        total_runs.len(),
        element_runs.len(),
        totals.len(),
        hits.len()
    );
    Ok(EXIT_OK)
}

pub fn evaluate(config: &RunConfig, total: &Path, element: &Path) -> Result<u8, CliError> {
    let split = load(config)?;
    let samples: Vec<_> = split.iter().cloned().collect();
    let totals = read_predictions(total)?;
    let elements = read_predictions(element)?;
    let report = evaluate_predictions(
        &samples,
        &totals,
        &elements,
        config.tau(),
        config.eval_hit_mode.unwrap_or_default(),
    )?;
    let path = output_path(config, "report.json")?;
    write_report(&path, &report)?;
    log::info!("wrote {}", path.display());
    println!("{report}");
    Ok(EXIT_OK)
}
