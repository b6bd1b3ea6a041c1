//! Classification metrics: micro/macro intent F1 and speaker accuracy.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub intent_f1_micro: f64,
    pub intent_f1_macro: f64,
    pub intent_accuracy: f64,
    pub speaker_accuracy: f64,
}

/// Fraction of `(truth, prediction)` pairs that agree; 0 for no pairs.
pub fn accuracy(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64
}

/// Micro-averaged F1 over `n_classes`. With exactly one prediction per
/// example this coincides with accuracy.
pub fn f1_micro(pairs: &[(usize, usize)], n_classes: usize) -> f64 {
    let (tp, fp, fn_) = (0..n_classes).fold((0usize, 0usize, 0usize), |acc, c| {
        let (tp, fp, fn_) = class_counts(pairs, c);
        (acc.0 + tp, acc.1 + fp, acc.2 + fn_)
    });
    f1(tp, fp, fn_)
}

/// Unweighted mean of per-class F1 over classes that occur in either the
/// labels or the predictions.
pub fn f1_macro(pairs: &[(usize, usize)], n_classes: usize) -> f64 {
    let scores: Vec<f64> = (0..n_classes)
        .map(|c| class_counts(pairs, c))
        .filter(|&(tp, fp, fn_)| tp + fp + fn_ > 0)
        .map(|(tp, fp, fn_)| f1(tp, fp, fn_))
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

fn class_counts(pairs: &[(usize, usize)], class: usize) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for &(t, p) in pairs {
        match (t == class, p == class) {
            (true, true) => counts.0 += 1,
            (false, true) => counts.1 += 1,
            (true, false) => counts.2 += 1,
            (false, false) => {}
        }
    }
    counts
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn summarize(intents: &[(usize, usize)], speakers: &[(usize, usize)], n_intents: usize) -> Metrics {
    Metrics {
        intent_f1_micro: f1_micro(intents, n_intents),
        intent_f1_macro: f1_macro(intents, n_intents),
        intent_accuracy: accuracy(intents),
        speaker_accuracy: accuracy(speakers),
    }
}
