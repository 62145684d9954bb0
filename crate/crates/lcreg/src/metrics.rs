//! Accuracy reports and metrics persistence: the JSON-Lines training log,
//! the per-run summary CSV, and the latent-weight histogram CSV.
//!
//! Every writer here is deterministic — same inputs, same bytes — because a
//! fixed seed is contracted to reproduce the metrics log exactly.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};

/// Top-1 accuracy in percent, overall and per cardinality split, plus the
/// per-class vector. Splits with no classes report no number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_top1: f64,
    pub many_top1: Option<f64>,
    pub medium_top1: Option<f64>,
    pub few_top1: Option<f64>,
    pub per_class_top1: Vec<f64>,
}

impl MetricsReport {
    /// Build a report from per-class correct/total counts and the cardinality
    /// split of the classes. The overall number is the sample-weighted
    /// combination of the per-class accuracies by construction.
    pub fn from_counts(correct: &[u64], totals: &[u64], splits: &Splits) -> Result<Self> {
        if correct.len() != totals.len() {
            return Err(Error::Shape(format!(
                "correct ({}) and total ({}) class counts differ",
                correct.len(),
                totals.len()
            )));
        }
        for (c, (&k, &n)) in correct.iter().zip(totals).enumerate() {
            if k > n {
                return Err(Error::InvalidArgument(format!("class {c}: {k} correct out of {n}")));
            }
        }
        let subset = |classes: &[usize]| -> Option<f64> {
            let n: u64 = classes.iter().map(|&c| totals[c]).sum();
            if classes.is_empty() || n == 0 {
                return None;
            }
            let k: u64 = classes.iter().map(|&c| correct[c]).sum();
            Some(100.0 * k as f64 / n as f64)
        };
        let all: Vec<usize> = (0..totals.len()).collect();
        let overall = subset(&all).ok_or_else(|| {
            Error::InvalidArgument("cannot score an empty evaluation set".to_string())
        })?;
        Ok(Self {
            overall_top1: overall,
            many_top1: subset(&splits.many),
            medium_top1: subset(&splits.medium),
            few_top1: subset(&splits.few),
            per_class_top1: correct
                .iter()
                .zip(totals)
                .map(|(&k, &n)| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 })
                .collect(),
        })
    }
}

/// One line of `metrics.jsonl`: a per-epoch training record or the final
/// held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsRow {
    Epoch(EpochRow),
    Eval(EvalRow),
}

/// Loss components and training-split accuracies for one epoch. Accuracy is
/// measured on the predictions made during the epoch itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: u8,
    pub epoch: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub total_loss: f64,
    pub class_loss: f64,
    pub recon_loss: f64,
    pub aug_loss: f64,
    #[serde(flatten)]
    pub accuracy: MetricsReport,
}

/// Final evaluation on a held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Append-only JSON-Lines writer; one compact object per row.
#[derive(Debug)]
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read a metrics log back, e.g. to locate the final evaluation row.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().map(|line| Ok(serde_json::from_str(line)?)).collect()
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `summary.csv`: one final-evaluation row per run.
pub fn write_summary(path: &Path, rows: &[(String, u64, MetricsReport)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "arm,seed,overall_top1,many_top1,medium_top1,few_top1")?;
    for (arm, seed, report) in rows {
        writeln!(
            out,
            "{arm},{seed},{},{},{},{}",
            report.overall_top1,
            csv_cell(report.many_top1),
            csv_cell(report.medium_top1),
            csv_cell(report.few_top1),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Write a latent-weight histogram as `category,weight` CSV rows.
pub fn write_histogram(path: &Path, weights: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "category,weight")?;
    for (m, w) in weights.iter().enumerate() {
        writeln!(out, "{m},{w}")?;
    }
    out.flush()?;
    Ok(())
}
