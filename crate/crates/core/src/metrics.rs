//! Binary classification metrics: confusion counts, accuracy, precision,
//! recall, F1, Matthews correlation, ROC curve and trapezoidal AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {probs} scores but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_lengths(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { probs: probs.len(), labels: labels.len() });
    }
    Ok(())
}

/// A sample is predicted positive iff `prob >= threshold`.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_lengths(probs, labels)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 { 0.0 } else { num / den }
}

/// Zero denominators yield 0 for precision, recall, F1 and MCC.
pub fn scalar_metrics(cm: &ConfusionMatrix) -> Result<ScalarMetrics> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyConfusion);
    }
    let (tp, tn, fp, fn_) = (cm.tp as f64, cm.tn as f64, cm.fp as f64, cm.fn_ as f64);
    let accuracy = (tp + tn) / (tp + tn + fp + fn_);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * (precision * recall), precision + recall);
    let mcc = ratio(tp * tn - fp * fn_, ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt());
    Ok(ScalarMetrics { accuracy, precision, recall, f1, mcc })
}

/// `(fpr, tpr)` points at every distinct score, highest first, starting at
/// `(0, 0)`. Tied scores form a single step.
pub fn roc_curve(probs: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_lengths(probs, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let (p, n) = (pos as f64, neg as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = probs[order[i]];
        while i < order.len() && probs[order[i]] == score {
            if labels[order[i]] == 1 { tp += 1 } else { fp += 1 }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auc: f64,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    #[serde(skip)]
    pub roc_points: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn from_predictions(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let cm = confusion(probs, labels, threshold)?;
        let s = scalar_metrics(&cm)?;
        let roc = roc_curve(probs, labels)?;
        Ok(Self {
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            mcc: s.mcc,
            auc: auc(&roc),
            threshold,
            confusion: cm,
            roc_points: roc,
        })
    }

    /// Scalars and confusion counts; ROC points go to [`Self::roc_csv`].
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}
