//! Confusion-matrix metrics in exact rational arithmetic, and ROC/AUC.

use num_rational::Ratio;
use num_traits::ToPrimitive;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Result<Self> {
        if preds.len() != labels.len() || preds.is_empty() {
            return Err(Error::Validation(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => return Err(Error::Validation(format!("prediction {p} / label {l} outside {{0, 1}}"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(TP + TN) / (TP + TN + FP + FN)`
    pub fn accuracy(&self) -> Result<Ratio<u64>> {
        ratio(self.tp + self.tn, self.total(), "accuracy of an empty set")
    }

    /// `TP / (TP + FN)`
    pub fn sensitivity(&self) -> Result<Ratio<u64>> {
        ratio(self.tp, self.tp + self.fn_, "sensitivity without positives")
    }

    /// `TN / (TN + FP)`
    pub fn specificity(&self) -> Result<Ratio<u64>> {
        ratio(self.tn, self.tn + self.fp, "specificity without negatives")
    }
}

fn ratio(num: u64, den: u64, what: &str) -> Result<Ratio<u64>> {
    if den == 0 {
        return Err(Error::Undefined(what.into()));
    }
    Ok(Ratio::new(num, den))
}

pub fn to_f64(r: Ratio<u64>) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMetrics {
    pub accuracy: Ratio<u64>,
    pub sensitivity: Ratio<u64>,
    pub specificity: Ratio<u64>,
    pub counts: Confusion,
}

/// Fails with [`Error::Undefined`] when either class is absent from `labels`.
pub fn confusion_metrics(preds: &[u8], labels: &[u8]) -> Result<ConfusionMetrics> {
    let counts = Confusion::from_predictions(preds, labels)?;
    Ok(ConfusionMetrics {
        accuracy: counts.accuracy()?,
        sensitivity: counts.sensitivity()?,
        specificity: counts.specificity()?,
        counts,
    })
}

/// Score at or above `threshold` predicts positive.
pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| (s >= threshold) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores at or above this predict positive; the first point uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// From (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
}

/// Rank-sum AUC with tied scores counted as half, plus the ROC staircase.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score {s} is not a number")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Twice the area, in pair counts, to stay in integers.
    let mut area2: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(Roc {
        auc: area2 as f64 / (2 * pos * neg) as f64,
        points,
    })
}
