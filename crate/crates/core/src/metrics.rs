//! Change-class F1 / IoU, overall accuracy, and a consistency check between
//! a reported F1 and a reported IoU using `F1 = 2·IoU / (1 + IoU)`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mask;

/// Pixel confusion tallies with change as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, other: Self) {
        *self = self.merge(&other);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub iou: f64,
    /// In `[0, 1]`; see [`MetricsReport::oa_percent`].
    pub oa: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn oa_percent(&self) -> f64 {
        100.0 * self.oa
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "F1 {:.3}  IoU {:.3}  OA {:.3}  (tp {} fp {} fn {} tn {})",
            self.f1,
            self.iou,
            self.oa_percent(),
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn
        )
    }
}

pub fn accumulate(pred: &Mask, gt: &Mask, counts: ConfusionCounts) -> Result<ConfusionCounts> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Metrics("masks must be binary".into()));
    }
    let mut c = counts;
    for (&p, &t) in pred.data.iter().zip(&gt.data) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// IoU and F1 of the change class are 1 when there are no positives in
/// either the prediction or the ground truth.
pub fn report(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Metrics("no pixels evaluated".into()));
    }
    let ConfusionCounts { tp, fp, fn_, tn } = *counts;
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(MetricsReport {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        oa: (tp + tn) as f64 / total as f64,
        counts: *counts,
    })
}

pub fn f1_from_iou(iou: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::Metrics(format!("IoU {iou} outside [0, 1]")));
    }
    Ok(2.0 * iou / (1.0 + iou))
}

/// Exact non-negative rational `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: i128,
    pub den: i128,
}

impl Ratio {
    pub fn new(num: i128, den: i128) -> Self {
        assert!(den > 0, "Ratio: denominator must be positive");
        Self { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `2r / (1 + r)`.
    pub fn f1_of_iou(self) -> Ratio {
        Ratio::new(2 * self.num, self.den + self.num)
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// `[lo, hi)`, or `[lo, hi]` when `hi_inclusive`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub lo: Ratio,
    pub hi: Ratio,
    pub hi_inclusive: bool,
}

impl Interval {
    pub fn contains(&self, r: Ratio) -> bool {
        r >= self.lo && (r < self.hi || (self.hi_inclusive && r == self.hi))
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        let lo = self.lo.max(other.lo);
        self.contains(lo) && other.contains(lo)
    }

    pub fn to_f64(&self) -> (f64, f64) {
        (self.lo.to_f64(), self.hi.to_f64())
    }
}

/// Values that round half-up to `k / 10^decimals`, intersected with
/// `[0, 1]`.
pub fn rounding_interval(k: i128, decimals: u32) -> Interval {
    let den = 2 * 10i128.pow(decimals);
    let lo = Ratio::new((2 * k - 1).max(0), den);
    let hi = Ratio::new(2 * k + 1, den);
    let one = Ratio::new(1, 1);
    if hi > one {
        Interval {
            lo,
            hi: one,
            hi_inclusive: true,
        }
    } else {
        Interval {
            lo,
            hi,
            hi_inclusive: false,
        }
    }
}

/// `num / den` rounded half-up to `decimals` places, as an integer count of
/// `10^-decimals` units.
pub fn round_ratio_half_up(num: i128, den: i128, decimals: u32) -> i128 {
    assert!(num >= 0 && den > 0);
    (2 * num * 10i128.pow(decimals) + den).div_euclid(2 * den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Consistent => "consistent",
            Verdict::Inconsistent => "inconsistent",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuditResult {
    pub verdict: Verdict,
    /// IoU values that round to the reported IoU.
    pub iou_interval: Interval,
    /// Image of `iou_interval` under `F1 = 2·IoU / (1 + IoU)`.
    pub f1_interval: Interval,
    /// F1 values that round to the reported F1.
    pub reported_f1_interval: Interval,
}

const MAX_DECIMALS: u32 = 12;

fn to_units(v: f64, decimals: u32, what: &str) -> Result<i128> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(Error::Metrics(format!("{what} {v} outside [0, 1]")));
    }
    let scaled = v * 10f64.powi(decimals as i32);
    let k = scaled.round();
    if (scaled - k).abs() > 1e-6 {
        return Err(Error::Metrics(format!(
            "{what} {v} has more than {decimals} decimals"
        )));
    }
    Ok(k as i128)
}

/// Checks whether a reported F1 can arise from any IoU that rounds to the
/// reported IoU, with both rounded half-up to `decimals` places.
pub fn audit_consistency(
    reported_f1: f64,
    reported_iou: f64,
    decimals: u32,
) -> Result<AuditResult> {
    if decimals == 0 || decimals > MAX_DECIMALS {
        return Err(Error::Metrics(format!(
            "decimals must be in 1..={MAX_DECIMALS}"
        )));
    }
    let iou_interval = rounding_interval(to_units(reported_iou, decimals, "IoU")?, decimals);
    let f1_interval = Interval {
        lo: iou_interval.lo.f1_of_iou(),
        hi: iou_interval.hi.f1_of_iou(),
        hi_inclusive: iou_interval.hi_inclusive,
    };
    let reported_f1_interval = rounding_interval(to_units(reported_f1, decimals, "F1")?, decimals);
    let verdict = if f1_interval.intersects(&reported_f1_interval) {
        Verdict::Consistent
    } else {
        Verdict::Inconsistent
    };
    Ok(AuditResult {
        verdict,
        iou_interval,
        f1_interval,
        reported_f1_interval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_counts() {
        let r = report(&ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 10,
        })
        .unwrap();
        assert_eq!(r.iou, 0.5);
        assert_eq!(r.f1, 6.0 / 9.0);
        assert_eq!(r.oa, 13.0 / 16.0);
    }

    #[test]
    fn empty_counts_error() {
        assert!(report(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn no_positives_scores_one() {
        let r = report(&ConfusionCounts {
            tn: 5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!((r.f1, r.iou, r.oa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn rounding_helper() {
        assert_eq!(round_ratio_half_up(8495, 10000, 3), 850);
        assert_eq!(round_ratio_half_up(8494, 10000, 3), 849);
        assert_eq!(round_ratio_half_up(1, 3, 2), 33);
    }

    #[test]
    fn interval_at_one_is_closed() {
        let i = rounding_interval(1000, 3);
        assert!(i.hi_inclusive);
        assert!(i.contains(Ratio::new(1, 1)));
        let r = audit_consistency(1.0, 1.0, 3).unwrap();
        assert_eq!(r.verdict, Verdict::Consistent);
    }

    #[test]
    fn bad_decimals_rejected() {
        assert!(audit_consistency(0.9, 0.8, 0).is_err());
        assert!(audit_consistency(0.9215, 0.8, 3).is_err());
        assert!(f1_from_iou(1.5).is_err());
    }
}
