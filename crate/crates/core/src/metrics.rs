//! Confusion-matrix metrics with malignant as the positive class.
//!
//! Metrics whose denominator is zero are `None`, never a conventional 0.

use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Malignant, Label::Malignant) => self.tp += 1,
            (Label::Benign, Label::Malignant) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Malignant, Label::Benign) => self.fn_ += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (Label, Label)>>(pairs: I) -> Self {
        let mut cm = ConfusionMatrix::default();
        pairs.into_iter().for_each(|(t, p)| cm.record(t, p));
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts with benign treated as the positive class.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionMatrix { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl core::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), Add::add)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub precision_b: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
}

/// Column order used by reports.
pub const METRIC_NAMES: [&str; 6] = ["sensitivity", "specificity", "precision", "precision_b", "accuracy", "f1"];

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.sensitivity, self.specificity, self.precision, self.precision_b, self.accuracy, self.f1]
    }

    pub fn from_values(v: [Option<f64>; 6]) -> Self {
        MetricsReport {
            sensitivity: v[0],
            specificity: v[1],
            precision: v[2],
            precision_b: v[3],
            accuracy: v[4],
            f1: v[5],
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_);
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricsReport {
        sensitivity,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        precision,
        precision_b: ratio(cm.tn, cm.tn + cm.fn_),
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        f1,
    })
}

/// Metrics of the pooled confusion matrix plus per-fold mean and sample
/// standard deviation (undefined per-fold values are skipped).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pooled: ConfusionMatrix,
    pub micro: MetricsReport,
    pub macro_mean: MetricsReport,
    pub macro_std: MetricsReport,
}

pub fn aggregate(matrices: &[ConfusionMatrix]) -> Result<Aggregate> {
    let pooled: ConfusionMatrix = matrices.iter().copied().sum();
    let micro = compute_metrics(&pooled)?;
    let per_fold: Vec<MetricsReport> = matrices
        .iter()
        .filter(|cm| cm.total() > 0)
        .map(compute_metrics)
        .collect::<Result<_>>()?;
    let mut mean = [None; 6];
    let mut std = [None; 6];
    for m in 0..6 {
        let vals: Vec<f64> = per_fold.iter().filter_map(|r| r.values()[m]).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 { vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        mean[m] = Some(mu);
        std[m] = Some(libm::sqrt(var));
    }
    Ok(Aggregate { pooled, micro, macro_mean: MetricsReport::from_values(mean), macro_std: MetricsReport::from_values(std) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_classifier() {
        let m = compute_metrics(&ConfusionMatrix::new(90, 0, 90, 0)).unwrap();
        assert!(m.values().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn undefined_precision() {
        let m = compute_metrics(&ConfusionMatrix::new(0, 0, 50, 10)).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.sensitivity, Some(0.0));
        assert!(compute_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn aggregate_pools_counts() {
        let folds = [ConfusionMatrix::new(10, 2, 8, 0), ConfusionMatrix::new(5, 3, 7, 5)];
        let agg = aggregate(&folds).unwrap();
        assert_eq!(agg.pooled, ConfusionMatrix::new(15, 5, 15, 5));
        assert_eq!(agg.micro.accuracy, Some(0.75));
        assert_eq!(agg.macro_mean.sensitivity, Some((1.0 + 0.5) / 2.0));
        assert!((agg.macro_std.sensitivity.unwrap() - libm::sqrt(0.125)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn accuracy_is_class_weighted_recall(tp in 0u64..100, fp in 0u64..100, tn in 0u64..100, fn_ in 0u64..100) {
            let cm = ConfusionMatrix::new(tp, fp, tn, fn_);
            let (p, n) = (tp + fn_, tn + fp);
            prop_assume!(p > 0 && n > 0);
            let m = compute_metrics(&cm).unwrap();
            let expected = (m.sensitivity.unwrap() * p as f64 + m.specificity.unwrap() * n as f64) / (p + n) as f64;
            prop_assert!((m.accuracy.unwrap() - expected).abs() < 1e-12);
        }

        #[test]
        fn polarity_swap(tp in 0u64..100, fp in 0u64..100, tn in 0u64..100, fn_ in 0u64..100) {
            let cm = ConfusionMatrix::new(tp, fp, tn, fn_);
            prop_assume!(cm.total() > 0);
            let a = compute_metrics(&cm).unwrap();
            let b = compute_metrics(&cm.swapped()).unwrap();
            prop_assert_eq!(a.sensitivity, b.specificity);
            prop_assert_eq!(a.specificity, b.sensitivity);
            prop_assert_eq!(a.precision, b.precision_b);
            prop_assert_eq!(a.precision_b, b.precision);
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }
}
