//! Accuracy and macro-F1 over integer class labels.
//!
//! Per-class precision, recall and F1 use the usual TP/FP/FN definitions; any
//! zero denominator yields 0 for that quantity. Macro-F1 averages over every
//! declared class, including classes absent from the gold labels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `counts[g][p]`: examples with gold `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

fn check(preds: &[usize], golds: &[usize], n_classes: Option<usize>) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![preds.len()],
            rhs: vec![golds.len()],
        });
    }
    if preds.is_empty() {
        return Err(invalid("metrics need at least one example"));
    }
    if let Some(n) = n_classes {
        if n < 2 {
            return Err(invalid("at least two classes are required"));
        }
        if let Some(&bad) = preds.iter().chain(golds).find(|&&l| l >= n) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: bad,
                size: n,
            });
        }
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check(preds, golds, None)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn confusion(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    check(preds, golds, Some(n_classes))?;
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn macro_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    Ok(confusion(preds, golds, n_classes)?.macro_f1())
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    /// Column total minus the diagonal.
    pub fn false_positives(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum::<u64>() - self.counts[class][class]
    }

    /// Row total minus the diagonal.
    pub fn false_negatives(&self, class: usize) -> u64 {
        self.counts[class].iter().sum::<u64>() - self.counts[class][class]
    }

    pub fn precision(&self, class: usize) -> f64 {
        let tp = self.true_positives(class);
        ratio(tp, tp + self.false_positives(class))
    }

    pub fn recall(&self, class: usize) -> f64 {
        let tp = self.true_positives(class);
        ratio(tp, tp + self.false_negatives(class))
    }

    pub fn f1(&self, class: usize) -> f64 {
        f1(self.precision(class), self.recall(class))
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.n_classes()).map(|i| self.true_positives(i)).sum();
        ratio(diag, self.total())
    }

    pub fn macro_f1(&self) -> f64 {
        let n = self.n_classes();
        (0..n).map(|i| self.f1(i)).sum::<f64>() / n as f64
    }
}
