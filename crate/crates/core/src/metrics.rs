//! Confusion counts and macro-averaged precision, recall and F1.
//!
//! Macro F1 here is the harmonic mean of macro precision (MAP) and macro
//! recall (MAR). The mean of per-class F1 scores is reported alongside it
//! as `mean_per_class_f1` for comparison with other toolkits, and is never
//! used in place of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square count matrix; entry `(g, p)` counts examples of gold class `g`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Column `c` minus the diagonal.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - self.get(c, c)
    }

    /// Row `c` minus the diagonal.
    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - self.get(c, c)
    }

    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() - self.true_positives(c) - self.false_positives(c) - self.false_negatives(c)
    }

    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }
}

/// Tabulates gold/predicted label pairs.
pub fn confusion(golds: &[usize], preds: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::DataIntegrity(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (i, (&g, &p)) in golds.iter().zip(preds).enumerate() {
        if g >= classes || p >= classes {
            return Err(Error::DataIntegrity(format!(
                "label pair ({g}, {p}) at position {i} outside 0..{classes}"
            )));
        }
        m.counts[g * classes + p] += 1;
    }
    Ok(m)
}

/// `num / den`, or zero when the denominator vanishes. The flag reports
/// whether the fallback was taken.
fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Precision and recall of class `c` treated as the positive class.
pub fn per_class_pr(m: &ConfusionMatrix, c: usize) -> (f64, f64) {
    let (p, r, _) = per_class_pr_flagged(m, c);
    (p, r)
}

fn per_class_pr_flagged(m: &ConfusionMatrix, c: usize) -> (f64, f64, usize) {
    let tp = m.true_positives(c);
    let (p, dp) = ratio(tp, tp + m.false_positives(c));
    let (r, dr) = ratio(tp, tp + m.false_negatives(c));
    (p, r, dp as usize + dr as usize)
}

/// Unweighted mean of per-class precision and recall over all classes
/// (MAP, MAR).
pub fn macro_average(m: &ConfusionMatrix) -> (f64, f64) {
    let c = m.classes();
    if c == 0 {
        return (0.0, 0.0);
    }
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    for class in 0..c {
        let (p, r) = per_class_pr(m, class);
        sum_p += p;
        sum_r += r;
    }
    (sum_p / c as f64, sum_r / c as f64)
}

/// Two-class MAP/MAR written in terms of TP/FP/TN/FN of the positive
/// class (index 1). Agrees exactly with [`macro_average`] at `C = 2`.
pub fn binary_macro_average(m: &ConfusionMatrix) -> Result<(f64, f64)> {
    if m.classes() != 2 {
        return Err(Error::Config(format!(
            "binary macro average needs 2 classes, got {}",
            m.classes()
        )));
    }
    let tp = m.get(1, 1);
    let fp = m.get(0, 1);
    let fn_ = m.get(1, 0);
    let tn = m.get(0, 0);
    let (precision_pos, _) = ratio(tp, tp + fp);
    let (recall_pos, _) = ratio(tp, tp + fn_);
    let (precision_neg, _) = ratio(tn, tn + fn_);
    let (recall_neg, _) = ratio(tn, tn + fp);
    Ok(((precision_neg + precision_pos) / 2.0, (recall_neg + recall_pos) / 2.0))
}

/// Harmonic mean of MAP and MAR; zero when both are zero.
pub fn macro_f1(map: f64, mar: f64) -> f64 {
    if map + mar == 0.0 {
        0.0
    } else {
        2.0 * map * mar / (map + mar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub support: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean of per-class F1 scores. Comparison value only.
    pub mean_per_class_f1: f64,
    pub accuracy: f64,
    /// Number of precision/recall values that hit a zero denominator and
    /// were reported as 0.
    pub zero_denominators: usize,
    pub confusion: ConfusionMatrix,
}

impl ClassificationReport {
    pub fn from_matrix(m: &ConfusionMatrix) -> Self {
        let c = m.classes();
        let mut precision = Vec::with_capacity(c);
        let mut recall = Vec::with_capacity(c);
        let mut zero_denominators = 0;
        for class in 0..c {
            let (p, r, z) = per_class_pr_flagged(m, class);
            precision.push(p);
            recall.push(r);
            zero_denominators += z;
        }
        if zero_denominators > 0 {
            log::warn!("{zero_denominators} precision/recall values had a zero denominator");
        }
        let (map, mar) = macro_average(m);
        let mean_per_class_f1 = if c == 0 {
            0.0
        } else {
            precision
                .iter()
                .zip(&recall)
                .map(|(&p, &r)| macro_f1(p, r))
                .sum::<f64>()
                / c as f64
        };
        let total = m.total();
        let correct: u64 = (0..c).map(|k| m.get(k, k)).sum();
        ClassificationReport {
            precision,
            recall,
            support: (0..c).map(|k| m.support(k)).collect(),
            macro_precision: map,
            macro_recall: mar,
            macro_f1: macro_f1(map, mar),
            mean_per_class_f1,
            accuracy: ratio(correct, total).0,
            zero_denominators,
            confusion: m.clone(),
        }
    }

    pub fn from_labels(golds: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        Ok(Self::from_matrix(&confusion(golds, preds, classes)?))
    }
}
