use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from positive-class probabilities. A score at or above the 0.5
/// threshold predicts malignant.
pub fn compute_metrics(scores: &[f64], labels: &[Label]) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return Err(Error::dim("compute_metrics", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput { op: "compute_metrics" });
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Input(format!("score {bad} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= THRESHOLD, y) {
            (true, Label::Malignant) => tp += 1,
            (true, Label::Benign) => fp += 1,
            (false, Label::Benign) => tn += 1,
            (false, Label::Malignant) => fn_ += 1,
        }
    }
    Ok(Metrics {
        accuracy: ratio(tp + tn, scores.len()),
        auc: auc(scores, labels),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Sort-based, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[Label]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut negatives_below, mut twice_wins) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            match labels[order[j]] {
                Label::Malignant => pos += 1,
                Label::Benign => neg += 1,
            }
            j += 1;
        }
        twice_wins += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    let positives = labels.iter().filter(|&&l| l == Label::Malignant).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    Some(twice_wins as f64 * 0.5 / (positives * negatives) as f64)
}
