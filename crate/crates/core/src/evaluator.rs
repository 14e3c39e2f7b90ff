//! Confusion matrices, micro/macro-F1, and misclassification tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSet;
use crate::labelspace::Outcome;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predictions} predictions for {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("gold label {0} is outside the label set")]
    InvalidGold(usize),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
}

/// Gold class × (predicted class ∪ Unknown). Column `C` is Unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn unknown_column(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold * (self.classes + 1) + predicted]
    }

    pub fn add(&mut self, gold: usize, predicted: Outcome) {
        let column = predicted.label().unwrap_or(self.classes);
        self.counts[gold * (self.classes + 1) + column] += 1;
    }

    pub fn row(&self, gold: usize) -> &[u64] {
        &self.counts[gold * (self.classes + 1)..(gold + 1) * (self.classes + 1)]
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.row(gold).iter().sum()
    }

    pub fn column_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks_exact(self.classes + 1)
    }
}

pub fn confusion(predictions: &[Outcome], golds: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let mut matrix = ConfusionMatrix::zeros(classes);
    for (&p, &g) in predictions.iter().zip(golds) {
        if g >= classes {
            return Err(EvalError::InvalidGold(g));
        }
        let p = match p {
            Outcome::Label(i) if i >= classes => Outcome::Unknown,
            other => other,
        };
        matrix.add(g, p);
    }
    Ok(matrix)
}

/// With one prediction per instance, micro precision and recall both reduce
/// to accuracy: correct / total. Unknown counts as wrong.
pub fn micro_f1(matrix: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = matrix.total();
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    Ok(matrix.diagonal_sum() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class precision, recall, F1; empty denominators give 0.
pub fn class_scores(matrix: &ConfusionMatrix, class: usize) -> ClassScores {
    let tp = matrix.get(class, class) as f64;
    let predicted = matrix.column_sum(class);
    let actual = matrix.row_sum(class);
    let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
    let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScores { precision, recall, f1 }
}

/// Unweighted mean of per-class F1 over the gold classes (Unknown excluded).
pub fn macro_f1(matrix: &ConfusionMatrix) -> Result<f64, EvalError> {
    if matrix.total() == 0 || matrix.classes() == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let sum: f64 = (0..matrix.classes()).map(|c| class_scores(matrix, c).f1).sum();
    Ok(sum / matrix.classes() as f64)
}

/// A predicted column: a class or the Unknown bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum PredictedColumn {
    Label(usize),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misclassified {
    pub label: usize,
    pub misclassification_rate: f64,
    pub dominant_wrong_prediction: Option<PredictedColumn>,
}

fn column_of(matrix: &ConfusionMatrix, column: usize) -> PredictedColumn {
    if column == matrix.unknown_column() {
        PredictedColumn::Unknown
    } else {
        PredictedColumn::Label(column)
    }
}

fn dominant_wrong(matrix: &ConfusionMatrix, gold: usize) -> Option<PredictedColumn> {
    let row = matrix.row(gold);
    let mut best: Option<(usize, u64)> = None;
    for (column, &count) in row.iter().enumerate() {
        if column == gold || count == 0 {
            continue;
        }
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((column, count));
        }
    }
    best.map(|(column, _)| column_of(matrix, column))
}

/// Labels with gold support, by misclassification rate descending (ties by
/// label index), truncated to `n`.
pub fn top_misclassified(matrix: &ConfusionMatrix, n: usize) -> Vec<Misclassified> {
    let mut rows: Vec<Misclassified> = (0..matrix.classes())
        .filter(|&c| matrix.row_sum(c) > 0)
        .map(|c| {
            let total = matrix.row_sum(c);
            let wrong = total - matrix.get(c, c);
            Misclassified {
                label: c,
                misclassification_rate: wrong as f64 / total as f64,
                dominant_wrong_prediction: dominant_wrong(matrix, c),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.misclassification_rate
            .total_cmp(&a.misclassification_rate)
            .then(a.label.cmp(&b.label))
    });
    rows.truncate(n);
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub misclassification_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub gold: String,
    pub predicted: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub unknown_predictions: u64,
    pub per_label: Vec<LabelRow>,
    pub top_confusions: Vec<Confusion>,
    pub labels: Vec<String>,
    pub confusion_matrix: Vec<Vec<u64>>,
}

pub const UNKNOWN_NAME: &str = "unknown";

impl EvalReport {
    pub fn build(matrix: &ConfusionMatrix, labels: &LabelSet, top_n: usize) -> Result<Self, EvalError> {
        let micro = micro_f1(matrix)?;
        let macro_ = macro_f1(matrix)?;
        let name = |column: usize| {
            if column == matrix.unknown_column() {
                UNKNOWN_NAME.to_string()
            } else {
                labels.name(column).to_string()
            }
        };
        let per_label = (0..matrix.classes())
            .map(|c| {
                let s = class_scores(matrix, c);
                LabelRow {
                    label: name(c),
                    support: matrix.row_sum(c),
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    misclassification_rate: 1.0 - s.recall,
                }
            })
            .collect();
        let mut confusions: Vec<(usize, usize, u64)> = Vec::new();
        for gold in 0..matrix.classes() {
            for (column, &count) in matrix.row(gold).iter().enumerate() {
                if column != gold && count > 0 {
                    confusions.push((gold, column, count));
                }
            }
        }
        confusions.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        let top_confusions = confusions
            .into_iter()
            .take(top_n)
            .map(|(g, p, count)| Confusion {
                gold: name(g),
                predicted: name(p),
                count,
            })
            .collect();
        Ok(EvalReport {
            instances: matrix.total(),
            micro_f1: micro,
            macro_f1: macro_,
            unknown_predictions: matrix.column_sum(matrix.unknown_column()),
            per_label,
            top_confusions,
            labels: labels.names().to_vec(),
            confusion_matrix: matrix.rows().map(<[u64]>::to_vec).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self, top_n: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "instances  {}", self.instances);
        let _ = writeln!(out, "micro-F1   {:.4}", self.micro_f1);
        let _ = writeln!(out, "macro-F1   {:.4}", self.macro_f1);
        let _ = writeln!(out, "unknown    {}", self.unknown_predictions);
        let mut worst: Vec<&LabelRow> = self.per_label.iter().filter(|r| r.support > 0).collect();
        worst.sort_by(|a, b| b.misclassification_rate.total_cmp(&a.misclassification_rate));
        let width = worst.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "\n{:<width$}  misclassified  support", "label");
        for row in worst.into_iter().take(top_n) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.1}%  {:>7}",
                row.label,
                100.0 * row.misclassification_rate,
                row.support
            );
        }
        if !self.top_confusions.is_empty() {
            let _ = writeln!(out, "\ntop confusions (gold -> predicted)");
            for c in &self.top_confusions {
                let _ = writeln!(out, "{} -> {}  {}", c.gold, c.predicted, c.count);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["label", "support", "precision", "recall", "f1", "misclassification_rate"])
            .expect("in-memory csv");
        for r in &self.per_label {
            writer
                .write_record([
                    r.label.clone(),
                    r.support.to_string(),
                    r.precision.to_string(),
                    r.recall.to_string(),
                    r.f1.to_string(),
                    r.misclassification_rate.to_string(),
                ])
                .expect("in-memory csv");
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}
