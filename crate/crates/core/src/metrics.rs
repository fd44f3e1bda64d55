//! Binary classification metrics with malignant as the positive class.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput(
            "confusion matrix of zero samples".into(),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (Label::Malignant, Label::Malignant) => cm.tp += 1,
            (Label::Malignant, Label::Benign) => cm.fp += 1,
            (Label::Benign, Label::Benign) => cm.tn += 1,
            (Label::Benign, Label::Malignant) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Fraction of correct predictions; 0 for an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    match cm.total() {
        0 => 0.0,
        total => (cm.tp + cm.tn) as f64 / total as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1 {
    pub value: f64,
    /// No positives predicted or present: the value is defined as 0.
    pub degenerate: bool,
}

pub fn f1(cm: &ConfusionMatrix) -> F1 {
    let denom = 2 * cm.tp + cm.fn_ + cm.fp;
    if denom == 0 {
        return F1 {
            value: 0.0,
            degenerate: true,
        };
    }
    F1 {
        value: (2 * cm.tp) as f64 / denom as f64,
        degenerate: false,
    }
}

pub fn tpr(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp, cm.tp + cm.fn_)
}

pub fn fpr(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.fp, cm.fp + cm.tn)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(fpr, tpr)` points from `(0,0)` to `(1,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweeps thresholds over the distinct scores in descending order, grouping
/// ties, and integrates TPR over FPR with the trapezoid rule.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<(RocCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Malignant).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("ROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            match labels[order[i]] {
                Label::Malignant => tp += 1,
                Label::Benign => fp += 1,
            }
            i += 1;
        }
        let point = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        let (x0, y0) = *points.last().unwrap();
        auc += (point.0 - x0) * (point.1 + y0) * 0.5;
        points.push(point);
    }
    Ok((RocCurve { points }, auc))
}

/// Predicted class from the malignant-class probability (argmax of two).
pub fn predict(score: f64) -> Label {
    if score > 0.5 {
        Label::Malignant
    } else {
        Label::Benign
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub confusion: ConfusionMatrix,
    pub roc: Vec<[f64; 2]>,
}

impl MetricsReport {
    /// Computes every metric from malignant-class probabilities.
    pub fn from_scores(scores: &[f64], labels: &[Label]) -> Result<Self> {
        let predictions: Vec<Label> = scores.iter().map(|&s| predict(s)).collect();
        let cm = confusion(&predictions, labels)?;
        let (roc, auc) = roc_auc(scores, labels)?;
        Ok(Self {
            accuracy: accuracy(&cm),
            f1: f1(&cm).value,
            auc,
            confusion: cm,
            roc: roc.points.iter().map(|&(x, y)| [x, y]).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, e))
    }
}

/// One row of the per-sample scores file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub file: String,
    pub label: usize,
    pub score: f64,
    pub prediction: usize,
}

impl ScoreRow {
    pub fn new(file: Option<&PathBuf>, label: Label, score: f64) -> Self {
        let file = file
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self {
            file,
            label: label.index(),
            score,
            prediction: predict(score).index(),
        }
    }
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::file(path, e)))
        .collect()
}

/// Recomputes a report from a scores file.
pub fn report_from_scores_file(path: &Path) -> Result<MetricsReport> {
    let rows = read_scores(path)?;
    let labels = rows
        .iter()
        .map(|r| Label::from_index(r.label))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    MetricsReport::from_scores(&scores, &labels)
}
