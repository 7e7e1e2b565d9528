use alloc::vec;

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro F1 of `predictions` against `labels` over `nodes`.
///
/// Macro F1 is the unweighted mean of per-class F1 over the classes that
/// occur among the true labels of `nodes`.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    nodes: &[usize],
    num_classes: usize,
) -> Result<Metrics> {
    if nodes.is_empty() {
        return Err(contract("cannot evaluate an empty node set"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut present = vec![false; num_classes];
    let mut correct = 0;
    for &i in nodes {
        let (p, y) = (predictions[i], labels[i]);
        present[y] = true;
        if p == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut classes = 0;
    for c in (0..num_classes).filter(|&c| present[c]) {
        f1_sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
        classes += 1;
    }
    Ok(Metrics {
        accuracy: correct as f64 / nodes.len() as f64,
        macro_f1: f1_sum / classes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn perfect_predictions() {
        let m = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], &[0, 1, 2, 3], 3).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_binary() {
        let labels = [0, 1, 0, 1];
        let m = classification_metrics(&[0; 4], &labels, &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 never occurs among the evaluated labels
        let m = classification_metrics(&[0, 1, 2], &[0, 1, 1], &[0, 1, 2], 3).unwrap();
        // class 0: f1 1; class 1: tp 1, fn 1 -> 2/3
        assert!((m.macro_f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn order_does_not_matter_and_empty_fails() {
        let preds = [1, 0, 2, 2, 1];
        let labels = [1, 1, 2, 0, 1];
        let a = classification_metrics(&preds, &labels, &[0, 1, 2, 3, 4], 3).unwrap();
        let rev: Vec<usize> = (0..5).rev().collect();
        assert_eq!(a, classification_metrics(&preds, &labels, &rev, 3).unwrap());
        assert!(classification_metrics(&preds, &labels, &[], 3).is_err());
    }
}
