use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tialign_core::image_augment::ImageBuffer;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tialign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tialign"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset() -> PathBuf {
    fixture("dataset.jsonl")
}

#[test]
fn validate_accepts_the_fixture() {
    let out = tialign(&["validate", s(&dataset())]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("16 records, 0 invalid"));
}

#[test]
fn validate_lists_a_bad_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let mut text = std::fs::read_to_string(dataset()).unwrap();
    text = text.replacen("\"total_score\": 1.0,", "\"total_score\": 7.0,", 1);
    std::fs::write(&path, text).unwrap();
    let out = tialign(&["validate", s(&path)]);
    assert_eq!(code(&out), 1);
    let report = stdout(&out);
    assert!(report.contains("line 1 `tr00`"), "{report}");
    assert!(report.contains("total_score"), "{report}");
    assert!(report.contains("1 invalid"), "{report}");
}

#[test]
fn validate_missing_file_is_an_io_error() {
    let out = tialign(&["validate", "/definitely/not/here.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_are_domain_failures() {
    assert_eq!(code(&tialign(&["no-such-command"])), 1);
    assert_eq!(code(&tialign(&["--help"])), 0);
}

#[test]
fn build_corpus_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");

    let out = tialign(&["--output-dir", s(&a), "build-corpus", s(&dataset()), "--task", "total"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), "10");
    assert_eq!(line_count(&a.join("corpus-total.jsonl")), 10);

    for dir in [&a, &b] {
        let out = tialign(&[
            "--output-dir",
            s(dir),
            "--seed",
            "4",
            "build-corpus",
            s(&dataset()),
            "--task",
            "element",
            "--perturbation-epsilon",
            "2",
            "--include-confidences",
        ]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(line_count(&a.join("corpus-element.jsonl")), 20);
    assert_eq!(
        std::fs::read(a.join("corpus-element.jsonl")).unwrap(),
        std::fs::read(b.join("corpus-element.jsonl")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "dataset_path = \"{}\"\nseed = 1\nperturbation_epsilon = 3\noutput_dir = \"from-config\"\n",
            s(&dataset())
        ),
    )
    .unwrap();
    let by_config = tialign(&["--config", s(&config), "build-corpus", "--task", "element"]);
    assert_eq!(code(&by_config), 0);
    let config_out = dir.path().join("from-config/corpus-element.jsonl");
    assert!(config_out.is_file());

    let flag_dir = dir.path().join("from-flag");
    let by_flag = tialign(&[
        "--config",
        s(&config),
        "--seed",
        "2",
        "--output-dir",
        s(&flag_dir),
        "build-corpus",
        "--task",
        "element",
    ]);
    assert_eq!(code(&by_flag), 0);
    let flag_out = flag_dir.join("corpus-element.jsonl");
    assert_ne!(std::fs::read(&config_out).unwrap(), std::fs::read(&flag_out).unwrap());
}

#[test]
fn predict_matches_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = tialign(&[
        "--output-dir",
        s(dir.path()),
        "--seed",
        "11",
        "predict",
        s(&dataset()),
        "--task",
        "total",
    ]);
    assert_eq!(code(&out), 0);
    let produced = std::fs::read_to_string(dir.path().join("predictions-total.jsonl")).unwrap();
    let golden = std::fs::read_to_string(fixture("golden-predictions-total.jsonl")).unwrap();
    assert_eq!(produced, golden);

    // Each golden score is the expectation of its own distribution.
    for line in golden.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let probs: Vec<f64> = serde_json::from_value(v["probabilities"].clone()).unwrap();
        let index: f64 = probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        let expected = 1.0 + (index - 1.0) * 4.0 / 14.0;
        assert!((v["continuous_score"].as_f64().unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn predict_replays_a_recorded_table() {
    // A table with no rows cannot answer anything: backend failure.
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("empty.jsonl");
    std::fs::write(&table, "").unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("mock_table = \"{}\"\n", s(&table))).unwrap();
    let out = tialign(&["--config", s(&config), "--output-dir", s(dir.path()), "predict", s(&dataset())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn unreachable_http_backend_exits_with_backend_code() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "backend = \"http\"\nendpoint = \"http://127.0.0.1:{port}/v1\"\nmodel = \"m\"\nretries = 0\nimage_base_url = \"http://img\"\n"
        ),
    )
    .unwrap();
    let out = tialign(&["--config", s(&config), "--output-dir", s(dir.path()), "predict", s(&dataset())]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn two_stage_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = tialign(&[
            "--output-dir",
            s(&dir.path().join(name)),
            "--seed",
            "5",
            "--concurrency",
            "3",
            "two-stage",
            s(&dataset()),
            "--include-prompt-type",
        ]);
        assert_eq!(code(&out), 0);
    }
    for file in ["predictions-element.jsonl", "predictions-total.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    assert_eq!(line_count(&dir.path().join("a/predictions-element.jsonl")), 6);
    assert_eq!(line_count(&dir.path().join("a/predictions-total.jsonl")), 3);
}

#[test]
fn ensemble_of_one_run_is_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&tialign(&["--output-dir", s(&run), "--seed", "9", "two-stage", s(&dataset())])), 0);
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        json!({"total_runs": ["run/predictions-total.jsonl"], "element_runs": ["run/predictions-element.jsonl"]})
            .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("ens");
    assert_eq!(code(&tialign(&["--output-dir", s(&out_dir), "ensemble", s(&spec)])), 0);
    for (input, output) in [
        ("predictions-total.jsonl", "ensemble-total.jsonl"),
        ("predictions-element.jsonl", "ensemble-element.jsonl"),
    ] {
        assert_eq!(
            std::fs::read(run.join(input)).unwrap(),
            std::fs::read(out_dir.join(output)).unwrap(),
            "{output}"
        );
    }
    assert_eq!(line_count(&out_dir.join("ensemble-element-hits.jsonl")), 6);
}

#[test]
fn ensemble_rejects_bad_weights() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        json!({"total_runs": ["x.jsonl"], "element_runs": ["y.jsonl"], "total_weights": [0.4]}).to_string(),
    )
    .unwrap();
    assert_eq!(code(&tialign(&["--output-dir", s(dir.path()), "ensemble", s(&spec)])), 1);
}

fn one_hot(n: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = 1.0;
    v
}

#[test]
fn evaluate_on_truth_is_a_perfect_score() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(dataset()).unwrap();
    let mut totals = String::new();
    let mut elements = String::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let id = v["sample_id"].as_str().unwrap();
        let total = v["total_score"].as_f64().unwrap();
        let level = ((total - 1.0) / 4.0 * 14.0).round() as usize;
        totals += &json!({"sample_id": id, "task": "total", "continuous_score": total,
            "argmax_label": ((b'a' + level as u8) as char).to_string(), "probabilities": one_hot(15, level)})
        .to_string();
        totals.push('\n');
        for e in v["elements"].as_array().unwrap() {
            let digit = (e["score"].as_f64().unwrap() * 6.0).round() as usize + 1;
            elements += &json!({"sample_id": id, "task": "element", "element_name": e["name"],
                "continuous_score": digit as f64, "argmax_label": digit.to_string(),
                "probabilities": one_hot(7, digit - 1)})
            .to_string();
            elements.push('\n');
        }
    }
    let (t, e) = (dir.path().join("t.jsonl"), dir.path().join("e.jsonl"));
    std::fs::write(&t, totals).unwrap();
    std::fs::write(&e, elements).unwrap();
    let out = tialign(&["--output-dir", s(dir.path()), "evaluate", s(&dataset()), "--total", s(&t), "--element", s(&e)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["main_score"], 1.0);
    assert_eq!(report["n_samples"], 16);
    assert_eq!(report["n_elements"], 32);
    assert!(stdout(&out).contains("Main Score"));
}

#[test]
fn evaluate_on_constant_predictions_is_a_metric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    let e = dir.path().join("e.jsonl");
    let row = |id: &str| {
        json!({"sample_id": id, "task": "total", "continuous_score": 3.0, "argmax_label": "h",
            "probabilities": one_hot(15, 7)})
        .to_string()
    };
    std::fs::write(&t, format!("{}\n{}\n", row("tr00"), row("tr01"))).unwrap();
    std::fs::write(&e, "").unwrap();
    let out = tialign(&["--output-dir", s(dir.path()), "evaluate", s(&dataset()), "--total", s(&t), "--element", s(&e)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn augment_images_writes_enlarged_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(dataset()).unwrap();
    let data = dir.path().join("data.jsonl");
    std::fs::write(&data, &text).unwrap();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let path = dir.path().join(v["image_ref"].as_str().unwrap());
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        ImageBuffer::from_fn(32, 32, |x, y| [(x * 8) as u8, (y * 8) as u8, 90]).save_png(&path).unwrap();
    }
    let out_dir = dir.path().join("out");
    let out = tialign(&["--output-dir", s(&out_dir), "--seed", "3", "augment-images", s(&data), "--fraction", "0.3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("3 augmented, 13 train samples"));
    assert_eq!(line_count(&out_dir.join("augmented.jsonl")), 19);
    let ok = tialign(&["validate", s(&out_dir.join("augmented.jsonl"))]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
}

#[test]
fn augment_images_without_images_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tialign(&[
        "--output-dir",
        s(dir.path()),
        "augment-images",
        s(&dataset()),
        "--image-root",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pseudo_label_merges_validation_into_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = tialign(&["--output-dir", s(dir.path()), "pseudo-label", s(&dataset()), "--label-elements"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let merged = dir.path().join("train-merged.jsonl");
    assert_eq!(line_count(&merged), 13);
    let text = std::fs::read_to_string(&merged).unwrap();
    assert_eq!(text.matches("\"provenance\":\"pseudo\"").count(), 3);
    assert_eq!(text.matches("\"provenance\":\"ground_truth\"").count(), 10);
    assert_eq!(code(&tialign(&["validate", s(&merged)])), 0);
}
