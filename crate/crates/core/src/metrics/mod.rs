//! Identification, localization and attribution metrics, the prediction
//! interchange format, and report assembly.

mod interchange;
mod map;
mod report;
mod text;

use crate::error::{IcmError, Result};

pub use interchange::{
    parse_ground_truth, parse_predictions, write_ground_truth, write_predictions, GroundTruthFile, InterchangeHeader,
    IntervalRecord, PredictionFile, VideoInfo, GROUND_TRUTH_FORMAT, INTERCHANGE_VERSION, PREDICTIONS_FORMAT,
};
pub use map::{ap_bruteforce, average_precision, map_at_iou, GtSpan, MapResult, ScoredSpan, BRUTEFORCE_LIMIT, IOU_THRESHOLDS};
pub use report::{evaluate, evaluate_files, ClassBreakdown, MetricsReport, REPORT_FORMAT};
pub use text::{rouge_l_f1, sem_c, tokens};

/// Fraction of positions where the two label sequences agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(IcmError::dim("accuracy", pred.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(IcmError::Domain("accuracy of an empty sequence".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Confusion counts of a binary labeling, positive = sentiment-bearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryCounts {
    pub fn from_labels(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(IcmError::dim("binary_counts", pred.len(), truth.len()));
        }
        let mut c = BinaryCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `F_β` with β = 2 from precision and recall; 0 when both vanish.
pub fn f2_from(p: f64, r: f64) -> f64 {
    let den = 4.0 * p + r;
    if den == 0.0 {
        0.0
    } else {
        5.0 * p * r / den
    }
}

pub fn f2_score(pred: &[bool], truth: &[bool]) -> Result<f64> {
    let c = BinaryCounts::from_labels(pred, truth)?;
    Ok(f2_from(c.precision(), c.recall()))
}

/// Share of sentiment-bearing positions predicted as background; `None`
/// when there are no such positions.
pub fn fnr(pred: &[bool], truth: &[bool]) -> Result<Option<f64>> {
    let c = BinaryCounts::from_labels(pred, truth)?;
    let positives = c.tp + c.fn_;
    Ok((positives > 0).then(|| c.fn_ as f64 / positives as f64))
}

/// Temporal IoU of two `[start, end]` intervals.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Length of the intersection of two intervals.
pub fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Fraction of located intervals whose claimed class matches the class of
/// the ground-truth interval overlapping it most (background when none
/// overlaps). `None` when nothing was located.
pub fn sen_a(claims: &[(usize, Option<usize>)]) -> Option<f64> {
    if claims.is_empty() {
        return None;
    }
    let hits = claims.iter().filter(|(claim, truth)| Some(*claim) == *truth).count();
    Some(hits as f64 / claims.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        let truth = [1usize; 10];
        let pred = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        assert_eq!(accuracy(&pred, &truth).unwrap(), 0.7);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(IcmError::Dimension { .. })));
    }

    #[test]
    fn f2_cases() {
        assert!((f2_from(0.5, 1.0) - 0.83333).abs() < 1e-5);
        let truth = [true, true, false, false];
        let pred = [true, true, true, true];
        assert!((f2_score(&pred, &truth).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(f2_score(&truth, &truth).unwrap(), 1.0);
        assert_eq!(f2_score(&[false; 4], &truth).unwrap(), 0.0);
    }

    #[test]
    fn fnr_cases() {
        let truth = [true; 10];
        let mut pred = [true; 10];
        pred[..3].fill(false);
        assert_eq!(fnr(&pred, &truth).unwrap(), Some(0.3));
        assert_eq!(fnr(&truth, &truth).unwrap(), Some(0.0));
        assert_eq!(fnr(&[false; 10], &truth).unwrap(), Some(1.0));
        assert_eq!(fnr(&[true, false], &[false, false]).unwrap(), None);
    }

    #[test]
    fn iou_cases() {
        assert!((interval_iou((0.0, 10.0), (5.0, 15.0)) - 0.33333).abs() < 1e-5);
        assert_eq!(interval_iou((2.0, 4.0), (2.0, 4.0)), 1.0);
        assert_eq!(interval_iou((0.0, 10.0), (9.0, 20.0)), 0.05);
        assert_eq!(interval_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
    }

    #[test]
    fn sen_a_cases() {
        assert_eq!(sen_a(&[(1, Some(1)), (2, Some(2))]), Some(1.0));
        assert_eq!(sen_a(&[(1, Some(2)), (2, Some(0))]), Some(0.0));
        assert_eq!(sen_a(&[(1, Some(1)), (2, Some(2)), (3, Some(3)), (3, Some(1))]), Some(0.75));
        assert_eq!(sen_a(&[]), None);
    }

    proptest! {
        #[test]
        fn f2_matches_confusion_identity(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let tp = pred.iter().zip(&truth).filter(|(p, t)| **p && **t).count() as f64;
            let fp = pred.iter().zip(&truth).filter(|(p, t)| **p && !**t).count() as f64;
            let fn_ = pred.iter().zip(&truth).filter(|(p, t)| !**p && **t).count() as f64;
            let f2 = f2_score(&pred, &truth).unwrap();
            let expect = if tp == 0.0 { 0.0 } else { 5.0 * tp / (5.0 * tp + 4.0 * fn_ + fp) };
            prop_assert!((f2 - expect).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&f2));
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in 0.0f64..10.0, la in 0.1f64..5.0, b in 0.0f64..10.0, lb in 0.1f64..5.0) {
            let x = interval_iou((a, a + la), (b, b + lb));
            prop_assert_eq!(x, interval_iou((b, b + lb), (a, a + la)));
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
