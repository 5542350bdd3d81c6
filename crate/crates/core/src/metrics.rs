//! Binary classification metrics: confusion matrix, accuracy, per-class
//! precision/recall/F1, support-weighted averages, ROC curve and AUC.
//!
//! Class order is (parasitized, uninfected) and parasitized is the positive
//! class throughout.

use serde::{Deserialize, Serialize};

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Row sum: number of samples whose true class is `class`.
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let c = self.counts;
        Self {
            counts: [[c[0][0], c[1][0]], [c[0][1], c[1][1]]],
        }
    }
}

pub fn confusion_matrix(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for (t, p) in pairs {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::usage(format!("label pair ({t}, {p}) out of range")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::usage("accuracy of an empty confusion matrix"));
    }
    Ok(cm.correct() as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when precision or recall had an empty denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and support for each class treated as positive.
pub fn per_class_prf(cm: &ConfusionMatrix) -> [ClassScores; NUM_CLASSES] {
    std::array::from_fn(|k| {
        let tp = cm.counts[k][k];
        let predicted: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][k]).sum();
        let actual = cm.support(k);
        let mut degenerate = false;
        let precision = ratio(tp, predicted, &mut degenerate);
        let recall = ratio(tp, actual, &mut degenerate);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
            support: actual,
            degenerate,
        }
    })
}

/// `Σ Mᵢ·nᵢ / N`.
pub fn weighted_average(values: &[f64], supports: &[u64]) -> Result<f64> {
    if values.len() != supports.len() {
        return Err(Error::usage("values and supports differ in length"));
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(Error::usage("weighted average with zero total support"));
    }
    let acc: f64 = values.iter().zip(supports).map(|(v, &n)| v * n as f64).sum();
    Ok(acc / total as f64)
}

/// ROC points `(fpr, tpr)` from (0,0) to (1,1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweeps every distinct score as a threshold, descending, predicting
/// positive when `score >= threshold`. Tied scores form a single point.
pub fn roc_points(scores: &[f64], positives: &[bool]) -> Result<RocCurve> {
    if scores.len() != positives.len() {
        return Err(Error::usage("scores and truths differ in length"));
    }
    let p = positives.iter().filter(|&&t| t).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::usage("ROC needs at least one positive and one negative sample"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::usage("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: Class,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub weighted: WeightedScores,
    /// Absent when no scores were available (e.g. a bare confusion matrix).
    pub auc: Option<f64>,
    pub confusion: [[u64; 2]; 2],
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, auc: Option<f64>) -> Result<Self> {
        let accuracy = accuracy(cm)?;
        let scores = per_class_prf(cm);
        let supports: Vec<u64> = scores.iter().map(|s| s.support).collect();
        let pick = |f: fn(&ClassScores) -> f64| -> Result<f64> {
            weighted_average(&scores.iter().map(f).collect::<Vec<_>>(), &supports)
        };
        let weighted = WeightedScores {
            precision: pick(|s| s.precision)?,
            recall: pick(|s| s.recall)?,
            f1: pick(|s| s.f1)?,
        };
        let per_class = Class::ALL
            .iter()
            .zip(scores)
            .map(|(&class, s)| ClassReport {
                class,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                support: s.support,
                degenerate: s.degenerate,
            })
            .collect();
        Ok(Self {
            accuracy,
            per_class,
            weighted,
            auc,
            confusion: cm.counts,
        })
    }

    /// Full report from `(true, predicted, positive-class score)` triples.
    /// AUC is omitted when only one class is present.
    pub fn from_predictions(preds: &[crate::training::Prediction]) -> Result<Self> {
        let cm = confusion_matrix(preds.iter().map(|p| (p.truth, p.predicted)))?;
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let positives: Vec<bool> = preds
            .iter()
            .map(|p| p.truth == Class::Parasitized.index())
            .collect();
        let area = roc_points(&scores, &positives).ok().map(|c| auc(&c));
        Self::from_confusion(&cm, area)
    }
}
