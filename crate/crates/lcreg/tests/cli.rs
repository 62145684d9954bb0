//! End-to-end checks of the `lcreg` binary: the generate/train/eval/histogram
//! pipeline on a small dataset, the gradient-check entry point, and the exit
//! code contract (0 success, 1 usage/configuration error, 2 runtime failure).

use std::path::Path;
use std::process::{Command, Output};

use lcreg::config::ExperimentConfig;

fn lcreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcreg")).args(args).output().expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

fn generate_small_dataset(dir: &Path) {
    let out = lcreg(&[
        "generate-data",
        "--classes",
        "4",
        "--nmax",
        "40",
        "--if",
        "10",
        "--noise",
        "0.3",
        "--test-per-class",
        "5",
        "--seed",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_success(&out, "generate-data");
}

#[test]
fn full_pipeline_round_trip() {
    let root = tempfile::tempdir().expect("temp dir");
    let data = root.path().join("data");
    generate_small_dataset(&data);

    // Both splits land on disk in the documented layout, and the balanced
    // test split has exactly classes * test_per_class rows plus a header.
    for split in ["train", "test"] {
        assert!(data.join(split).join("spec.json").is_file(), "{split} spec missing");
        assert!(data.join(split).join("labels.csv").is_file(), "{split} labels missing");
    }
    let test_labels =
        std::fs::read_to_string(data.join("test").join("labels.csv")).expect("labels readable");
    assert_eq!(test_labels.lines().count(), 1 + 4 * 5, "balanced test split size");

    // A short two-stage run driven by a JSON config file.
    let cfg =
        ExperimentConfig { stage1_epochs: 2, stage2_epochs: 1, ..ExperimentConfig::default() };
    let cfg_path = root.path().join("config.json");
    cfg.save(&cfg_path).expect("config saves");

    let run = root.path().join("run");
    let out = lcreg(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_success(&out, "train");
    let text = stdout(&out);
    assert!(text.contains("arm full"), "train names its arm: {text}");
    assert!(text.contains("overall"), "train prints a report: {text}");

    // Training leaves a metrics log (one JSON object per line), a summary
    // row for the run, and a loadable checkpoint.
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).expect("metrics log exists");
    let rows: Vec<serde_json::Value> =
        metrics.lines().map(|line| serde_json::from_str(line).expect("row parses")).collect();
    let epoch_rows = rows.iter().filter(|r| r.get("total_loss").is_some()).count();
    assert_eq!(epoch_rows, 3, "one loss row per epoch across both stages");
    assert!(
        rows.last().is_some_and(|r| r.get("overall_top1").is_some()),
        "log ends with a final evaluation row"
    );
    let summary = std::fs::read_to_string(run.join("summary.csv")).expect("summary exists");
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("arm,seed,overall_top1,many_top1,medium_top1,few_top1"));
    assert!(lines.next().is_some_and(|row| row.starts_with("full,3,")), "summary row");

    // Evaluation reloads the checkpoint and prints the report as JSON.
    let checkpoint = run.join("checkpoint");
    let out = lcreg(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_success(&out, "eval");
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("eval prints JSON");
    let overall = report["overall_top1"].as_f64().expect("overall accuracy present");
    assert!((0.0..=100.0).contains(&overall), "accuracy is a percentage: {overall}");
    assert_eq!(report["per_class_top1"].as_array().map(Vec::len), Some(4), "one entry per class");

    // Histogram export names its output after the image stem and writes one
    // weight per latent category, summing to one.
    let image = data.join("test").join("data").join("sample_00000.lct");
    let hist_dir = root.path().join("hist");
    let out = lcreg(&[
        "histogram",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        hist_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "histogram");
    let csv = std::fs::read_to_string(hist_dir.join("histogram_sample_00000.csv"))
        .expect("histogram csv exists");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("category,weight"));
    let weights: Vec<f64> =
        lines.map(|l| l.split_once(',').expect("category,weight row").1.parse().unwrap()).collect();
    assert_eq!(weights.len(), cfg.latent_count, "one weight per latent category");
    let total: f64 = weights.iter().sum();
    assert!((total - 1.0).abs() <= 1e-9, "weights sum to one, got {total}");
}

#[test]
fn gradcheck_reports_error_magnitude() {
    let out = lcreg(&["gradcheck", "--seed", "2"]);
    assert_success(&out, "gradcheck");
    let text = stdout(&out);
    let value = text
        .trim()
        .strip_prefix("max relative gradient error: ")
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or_else(|| panic!("unexpected gradcheck output: {text}"));
    assert!(value <= 1e-4, "reported error {value} exceeds the gate");
}

#[test]
fn ablation_writes_summary_rows() {
    let root = tempfile::tempdir().expect("temp dir");
    let data = root.path().join("data");
    generate_small_dataset(&data);

    let cfg =
        ExperimentConfig { stage1_epochs: 1, stage2_epochs: 0, ..ExperimentConfig::default() };
    let cfg_path = root.path().join("config.json");
    cfg.save(&cfg_path).expect("config saves");

    let out_dir = root.path().join("ablation");
    let out = lcreg(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--arms",
        "baseline,full",
        "--seeds",
        "0",
    ]);
    assert_success(&out, "ablate");
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).expect("summary exists");
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "one row per arm and seed: {summary}");
    assert!(rows[0].starts_with("baseline,0,"), "first row: {summary}");
    assert!(rows[1].starts_with("full,0,"), "second row: {summary}");
}

#[test]
fn usage_errors_exit_one() {
    // A config path that does not exist is a configuration error, and the
    // message names the offending path.
    let out = lcreg(&["train", "--config", "missing.json", "--data", "unused", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("missing.json"), "stderr: {}", stderr(&out));

    // Unknown flags are rejected by argument parsing with the same code.
    let out = lcreg(&["generate-data", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
}

#[test]
fn runtime_failures_exit_two() {
    let root = tempfile::tempdir().expect("temp dir");
    let missing = root.path().join("no-such-checkpoint");
    let out = lcreg(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--data",
        root.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}
