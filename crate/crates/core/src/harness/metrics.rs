//! Classification metrics: confusion matrix, accuracy, and F1.

use serde::{Deserialize, Serialize};

/// Metrics of one evaluation. `f1` is the positive-class F1 for binary
/// problems and the macro average otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// confusion[true][pred] counts.
    pub confusion: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

/// Count (true, predicted) pairs into an n x n matrix.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<u64>> {
    assert_eq!(preds.len(), labels.len(), "one prediction per label");
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        assert!(p < n_classes && l < n_classes, "class index out of range");
        m[l][p] += 1;
    }
    m
}

/// Derive all metrics from a confusion matrix. A class with no true and no
/// predicted samples gets precision = recall = F1 = 0 and a warning, which
/// keeps single-class test folds well-defined.
pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> Metrics {
    let n = confusion.len();
    assert!(n >= 2, "need at least two classes");
    let total: u64 = confusion.iter().flatten().sum();
    assert!(total > 0, "empty confusion matrix");
    let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();

    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut f1s = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    for c in 0..n {
        let tp = confusion[c][c];
        let pred_c: u64 = (0..n).map(|i| confusion[i][c]).sum();
        let true_c: u64 = confusion[c].iter().sum();
        if true_c == 0 {
            warnings.push(format!("class {c} absent from the evaluation set; its F1 is 0"));
        }
        let p = if pred_c == 0 { 0.0 } else { tp as f64 / pred_c as f64 };
        let r = if true_c == 0 { 0.0 } else { tp as f64 / true_c as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        precision.push(p);
        recall.push(r);
        f1s.push(f1);
    }

    let f1 = if n == 2 {
        // binary: the positive class is class 1
        f1s[1]
    } else {
        f1s.iter().sum::<f64>() / n as f64
    };

    Metrics {
        accuracy: correct as f64 / total as f64,
        f1,
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1s,
        confusion,
        warnings,
    }
}

/// Fraction of positions where the two sequences agree.
pub fn plain_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert!(!preds.is_empty() && preds.len() == labels.len());
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
