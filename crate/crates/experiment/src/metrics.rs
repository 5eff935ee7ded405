//! Macro-averaged classification metrics.

use serde::{Deserialize, Serialize};

use crate::{ExperimentError, Result, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean one-vs-rest AUC over classes that have both positives and
    /// negatives in the sample.
    pub auc: f64,
    pub per_class_precision: [f64; NUM_CLASSES],
    pub per_class_recall: [f64; NUM_CLASSES],
    pub per_class_f1: [f64; NUM_CLASSES],
    pub per_class_auc: [Option<f64>; NUM_CLASSES],
    /// Rows are true classes, columns predictions.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub confusion_normalized: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub support: [usize; NUM_CLASSES],
}

/// Reference headline numbers for the best real-data model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadlineMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

impl HeadlineMetrics {
    pub fn reference_dilated() -> Self {
        Self {
            accuracy: 0.9667,
            precision: 0.9656,
            recall: 0.9692,
            f1: 0.9673,
            auc: 0.9990,
        }
    }
}

impl MetricsReport {
    pub fn headline(&self) -> HeadlineMetrics {
        HeadlineMetrics {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            auc: self.auc,
        }
    }

    /// Off-diagonal unordered class pair with the most confusions, ties to the
    /// lexicographically first pair.
    pub fn most_confused_pair(&self) -> (usize, usize) {
        let mut best = ((0, 1), 0);
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                let n = self.confusion[a][b] + self.confusion[b][a];
                if n > best.1 {
                    best = ((a, b), n);
                }
            }
        }
        best.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mann–Whitney estimate of P(score_pos > score_neg), ties counted half.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// `scores[i]` holds one score per class for sample `i`.
pub fn compute_metrics(truth: &[usize], pred: &[usize], scores: &[Vec<f64>]) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(ExperimentError::LengthMismatch("no samples".into()));
    }
    if truth.len() != pred.len() || truth.len() != scores.len() {
        return Err(ExperimentError::LengthMismatch(format!(
            "{} labels, {} predictions, {} score rows",
            truth.len(),
            pred.len(),
            scores.len()
        )));
    }
    if let Some(&label) = truth.iter().chain(pred).find(|&&l| l >= NUM_CLASSES) {
        return Err(ExperimentError::UnknownClassLabel {
            label,
            classes: NUM_CLASSES,
        });
    }
    if let Some(row) = scores.iter().find(|r| r.len() != NUM_CLASSES) {
        return Err(ExperimentError::LengthMismatch(format!(
            "score row has {} entries, expected {NUM_CLASSES}",
            row.len()
        )));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }
    let mut precision = [0.0; NUM_CLASSES];
    let mut recall = [0.0; NUM_CLASSES];
    let mut f1 = [0.0; NUM_CLASSES];
    let mut auc = [None; NUM_CLASSES];
    let mut support = [0; NUM_CLASSES];
    let mut normalized = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c];
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        support[c] = confusion[c].iter().sum();
        precision[c] = ratio(tp, predicted);
        recall[c] = ratio(tp, support[c]);
        f1[c] = ratio(2 * tp, predicted + support[c]);
        for k in 0..NUM_CLASSES {
            normalized[c][k] = ratio(confusion[c][k], support[c]);
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        auc[c] = rank_auc(&col, &pos);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let defined: Vec<f64> = auc.iter().flatten().copied().collect();
    let trace: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: ratio(trace, truth.len()),
        precision: mean(&precision),
        recall: mean(&recall),
        f1: mean(&f1),
        auc: if defined.is_empty() { 0.5 } else { mean(&defined) },
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
        per_class_auc: auc,
        confusion,
        confusion_normalized: normalized,
        support,
    })
}
