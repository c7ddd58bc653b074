//! Classification metrics, prediction and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TaskSpec};
use crate::encoder::{infer_logits, ModelParams};
use crate::error::{Error, Result};
use crate::tokenizer::{make_batch, TokenBatch, Vocab};
use crate::trainer::RunRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Accuracy plus support-weighted precision, recall and F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics for predictions against labels over `k` classes. Empty
/// denominators give 0, so a class with no support contributes nothing.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], k: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("metrics need at least one class"));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::invalid(format!("class {bad} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let total = labels.len() as u64;
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        if total == 0 {
            return 0.0;
        }
        per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
    };
    Ok(MetricsReport {
        accuracy: ratio(correct, total),
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
        confusion,
    })
}

/// Argmax of the head logits for the batch's task; ties go to the lowest
/// class index.
pub fn predict(params: &ModelParams, batch: &TokenBatch) -> Result<Vec<usize>> {
    if !params.has_head(batch.task_id) {
        return Err(Error::UnknownTask(batch.task_id.to_string()));
    }
    Ok(infer_logits(params, batch)?.argmax_rows())
}

/// Metrics of `params` on `examples`, evaluated in chunks of `batch_size`.
pub fn evaluate(
    params: &ModelParams,
    examples: &[Example],
    vocab: &Vocab,
    spec: &TaskSpec,
    batch_size: usize,
) -> Result<MetricsReport> {
    if !params.has_head(spec.task_id) {
        return Err(Error::UnknownTask(spec.task_id.to_string()));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, vocab, spec, params.config().max_len)?;
        predictions.extend(predict(params, &batch)?);
        labels.extend(batch.labels.class_indices());
    }
    compute_metrics(&predictions, &labels, spec.num_classes())
}

/// `value × 100` with two decimals and a `.` separator.
pub fn percent(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}

/// A plain-text table with Acc, F1, P and R columns in percent.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .max()
        .unwrap_or(0)
        .max("Model".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "Model", "Acc", "F1", "P", "R");
    for (label, m) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
            label,
            percent(m.accuracy),
            percent(m.weighted_f1),
            percent(m.precision),
            percent(m.recall)
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

/// Test metrics of a run: one table row per task, or the whole record as
/// JSON with full precision.
pub fn render_report(record: &RunRecord, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => record.to_json(),
        ReportFormat::Table => {
            let name = record.pipeline.display_name();
            let rows: Vec<(String, &MetricsReport)> = record
                .test
                .iter()
                .map(|(task, m)| (format!("{name} ({task})"), m))
                .collect();
            render_table(&rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.per_class[0].precision, 0.5);
        assert_eq!(m.per_class[0].recall, 1.0);
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[1].precision, 1.0);
        assert!((m.per_class[1].recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class[1].f1 - 0.8).abs() < 1e-15);
        assert!((m.weighted_f1 - (2.0 / 3.0 + 3.0 * 0.8) / 4.0).abs() < 1e-15);
        assert_eq!(m.confusion, vec![vec![1, 0], vec![1, 2]]);
        assert_eq!(m.recall, m.accuracy);
    }

    #[test]
    fn perfect_and_absent_class() {
        let m = compute_metrics(&[0, 2, 2], &[0, 2, 2], 4).unwrap();
        assert_eq!((m.accuracy, m.weighted_f1), (1.0, 1.0));
        assert_eq!(m.per_class[1].f1, 0.0);
        assert_eq!(m.per_class[1].support, 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[3], &[0], 2).is_err());
    }

    #[test]
    fn table_cells() {
        let mut m = compute_metrics(&[0], &[0], 2).unwrap();
        m.accuracy = 0.7863;
        assert_eq!(percent(m.accuracy), "78.63");
        let t = render_table(&[("BERT".into(), &m)]);
        assert!(t.contains("78.63"));
        assert!(t.lines().next().unwrap().contains("Acc"));
    }
}
