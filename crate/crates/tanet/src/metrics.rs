//! Change-mask evaluation: thresholding, confusion counts and
//! precision/recall/F1, in aggregate and per-image-mean form.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel-level confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsMode {
    Aggregate,
    PerImageMean,
}

impl std::fmt::Display for MetricsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricsMode::Aggregate => write!(f, "aggregate"),
            MetricsMode::PerImageMean => write!(f, "per_image_mean"),
        }
    }
}

/// Precision/recall/F1 with the counts they came from. Degenerate
/// denominators yield 0 with the corresponding flag set, never NaN.
#[derive(Clone, Copy, Debug)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mode: MetricsMode,
    pub degenerate_precision: bool,
    pub degenerate_recall: bool,
}

impl MetricsReport {
    /// One comma-separated log line: epoch, tp, fp, fn, precision, recall,
    /// f1, mode.
    pub fn csv_line(&self, epoch: usize) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            epoch, self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1, self.mode
        )
    }
}

/// Threshold sigmoid(logit) at `threshold`; returns one byte per pixel.
pub fn binarize<E: Elem>(logits: &Tensor<E>, threshold: f64) -> Vec<u8> {
    logits
        .data()
        .iter()
        .map(|z| {
            let sig = 1.0 / (1.0 + (-z.to_f64()).exp());
            u8::from(sig > threshold)
        })
        .collect()
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!("prediction has {} pixels, truth {}", pred.len(), truth.len()),
        ));
    }
    let mut c = Confusion::default();
    for (p, t) in pred.iter().zip(truth) {
        match (*p != 0, *t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Precision = tp/(tp+fp), recall = tp/(tp+fn), F1 their harmonic mean.
pub fn prf1(c: Confusion, mode: MetricsMode) -> MetricsReport {
    let degenerate_precision = c.tp + c.fp == 0;
    let degenerate_recall = c.tp + c.fn_ == 0;
    let precision = if degenerate_precision { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = if degenerate_recall { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    };
    MetricsReport {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        precision,
        recall,
        f1,
        mode,
        degenerate_precision,
        degenerate_recall,
    }
}

/// Aggregate and per-image-mean reports over per-image confusion counts.
pub fn evaluate_counts(per_image: &[Confusion]) -> (MetricsReport, MetricsReport) {
    let mut total = Confusion::default();
    let mut sums = (0.0, 0.0, 0.0);
    for c in per_image {
        total.add(*c);
        let r = prf1(*c, MetricsMode::PerImageMean);
        sums.0 += r.precision;
        sums.1 += r.recall;
        sums.2 += r.f1;
    }
    let aggregate = prf1(total, MetricsMode::Aggregate);
    let n = per_image.len().max(1) as f64;
    let mean = MetricsReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: sums.0 / n,
        recall: sums.1 / n,
        f1: sums.2 / n,
        mode: MetricsMode::PerImageMean,
        degenerate_precision: false,
        degenerate_recall: false,
    };
    (aggregate, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_fixture() {
        let r = prf1(Confusion { tp: 3, fp: 1, fn_: 1 }, MetricsMode::Aggregate);
        assert_eq!((r.precision, r.recall, r.f1), (0.75, 0.75, 0.75));
    }

    #[test]
    fn perfect_prediction() {
        let pred = [0, 1, 1, 0, 1];
        let c = confusion(&pred, &pred).unwrap();
        let r = prf1(c, MetricsMode::Aggregate);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_negative_prediction_is_flagged_not_nan() {
        let c = confusion(&[0, 0, 0], &[1, 0, 1]).unwrap();
        let r = prf1(c, MetricsMode::Aggregate);
        assert!(r.degenerate_precision && !r.degenerate_recall);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_is_harmonic_mean_and_symmetric() {
        let r = prf1(Confusion { tp: 6, fp: 2, fn_: 6 }, MetricsMode::Aggregate);
        let (p, q) = (r.precision, r.recall);
        assert!((r.f1 - 2.0 * p * q / (p + q)).abs() < 1e-12);
        // Swapping fp and fn swaps precision/recall but leaves f1 unchanged.
        let s = prf1(Confusion { tp: 6, fp: 6, fn_: 2 }, MetricsMode::Aggregate);
        assert!((r.f1 - s.f1).abs() < 1e-12);
        assert_eq!((r.precision, r.recall), (s.recall, s.precision));
    }
}
