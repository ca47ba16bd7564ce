//! Evaluation measures comparing original and reconstructed data, and
//! detection outputs derived from them.

use thiserror::Error;

use crate::grid::{Field, Shape};
use crate::roi::RoiMask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("lattice mismatch: {0} vs {1}")]
    LatticeMismatch(Shape, Shape),
    #[error("match radius must be non-negative and finite, got {0}")]
    BadRadius(f64),
    #[error("reference field has zero norm")]
    ZeroNorm,
}

/// Detected events: nodal points per frame and/or an areal mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    /// (frame, u, v) nodal points.
    pub tc: Vec<(usize, f64, f64)>,
    /// Areal mask, when the event type is region-shaped.
    pub ar: Option<RoiMask>,
}

/// Outcome of a rate whose denominator can be empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateOutcome {
    Rate(f64),
    NoEvents,
}

impl RateOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            RateOutcome::Rate(v) => Some(*v),
            RateOutcome::NoEvents => None,
        }
    }
}

/// Nodal-event error rate report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TcErrorReport {
    pub total_truth: usize,
    pub matched: usize,
    /// Truth points with no test point within the radius.
    pub errors: usize,
    /// Test points left unmatched; reported separately, not folded into
    /// the error count.
    pub extra_test: usize,
    /// errors / total * 100, when total > 0.
    pub rate_percent: RateOutcome,
}

/// Greedy per-frame nearest-first matching of test points to truth points.
///
/// A truth point counts as an error when no test point lies within
/// `match_radius` of it (after closer pairs have claimed their partners).
pub fn tc_error_rate(
    truth: &DetectionSet,
    test: &DetectionSet,
    match_radius: f64,
) -> Result<TcErrorReport, MetricsError> {
    if !(match_radius.is_finite() && match_radius >= 0.0) {
        return Err(MetricsError::BadRadius(match_radius));
    }
    let total_truth = truth.tc.len();
    let mut matched = 0usize;
    let mut extra_test = test.tc.len();

    let frames: std::collections::BTreeSet<usize> =
        truth.tc.iter().map(|p| p.0).chain(test.tc.iter().map(|p| p.0)).collect();
    for frame in frames {
        let truth_pts: Vec<(f64, f64)> = truth
            .tc
            .iter()
            .filter(|p| p.0 == frame)
            .map(|p| (p.1, p.2))
            .collect();
        let test_pts: Vec<(f64, f64)> = test
            .tc
            .iter()
            .filter(|p| p.0 == frame)
            .map(|p| (p.1, p.2))
            .collect();
        // all candidate pairs within radius, nearest first; ties break on
        // (truth index, test index) for determinism
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, &(tu, tv)) in truth_pts.iter().enumerate() {
            for (j, &(su, sv)) in test_pts.iter().enumerate() {
                let d = ((tu - su).powi(2) + (tv - sv).powi(2)).sqrt();
                if d <= match_radius {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut truth_used = vec![false; truth_pts.len()];
        let mut test_used = vec![false; test_pts.len()];
        for (_, i, j) in pairs {
            if !truth_used[i] && !test_used[j] {
                truth_used[i] = true;
                test_used[j] = true;
                matched += 1;
                extra_test -= 1;
            }
        }
    }

    let errors = total_truth - matched;
    let rate_percent = if total_truth == 0 {
        RateOutcome::NoEvents
    } else {
        RateOutcome::Rate(errors as f64 / total_truth as f64 * 100.0)
    };
    Ok(TcErrorReport {
        total_truth,
        matched,
        errors,
        extra_test,
        rate_percent,
    })
}

/// Intersection-over-union report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou: f64,
    /// Both masks empty: iou defined as 1 and flagged here.
    pub both_empty: bool,
}

/// Cellwise TP / (TP + FP + FN).
pub fn iou(truth: &RoiMask, test: &RoiMask) -> Result<IouReport, MetricsError> {
    if truth.shape() != test.shape() {
        return Err(MetricsError::LatticeMismatch(truth.shape(), test.shape()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&a, &b) in truth.bits().iter().zip(test.bits()) {
        match (a, b) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = tp + fp + fn_;
    let both_empty = denom == 0;
    let iou = if both_empty {
        1.0
    } else {
        tp as f64 / denom as f64
    };
    Ok(IouReport {
        tp,
        fp,
        fn_,
        iou,
        both_empty,
    })
}

/// ||x - x_hat|| / ||x|| over valid (non-fill) cells of `x`.
pub fn relative_l2(x: &Field, x_hat: &Field) -> Result<f64, MetricsError> {
    if x.shape() != x_hat.shape() {
        return Err(MetricsError::LatticeMismatch(x.shape(), x_hat.shape()));
    }
    let fill = x.fill_value();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in x.samples().iter().zip(x_hat.samples()) {
        if fill == Some(a) {
            continue;
        }
        let (a, b) = (a as f64, b as f64);
        num += (a - b) * (a - b);
        den += a * a;
    }
    if den == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    Ok((num / den).sqrt())
}

/// Fraction of truth TC points whose nearest cell is outside the mask.
pub fn fn_ratio_points(
    truth: &[(usize, f64, f64)],
    mask: &RoiMask,
) -> Result<RateOutcome, MetricsError> {
    if truth.is_empty() {
        return Ok(RateOutcome::NoEvents);
    }
    let shape = mask.shape();
    let mut missed = 0usize;
    for &(frame, u, v) in truth {
        let t = frame.min(shape.t.saturating_sub(1));
        let h = (u.round().max(0.0) as usize).min(shape.h - 1);
        let w = (v.round().max(0.0) as usize).min(shape.w - 1);
        if !mask.get(t, h, w) {
            missed += 1;
        }
    }
    Ok(RateOutcome::Rate(missed as f64 / truth.len() as f64))
}

/// FN cells / truth cells for areal events.
pub fn fn_ratio_mask(truth: &RoiMask, predicted: &RoiMask) -> Result<RateOutcome, MetricsError> {
    if truth.shape() != predicted.shape() {
        return Err(MetricsError::LatticeMismatch(
            truth.shape(),
            predicted.shape(),
        ));
    }
    let truth_cells = truth.count_set();
    if truth_cells == 0 {
        return Ok(RateOutcome::NoEvents);
    }
    let fn_cells = truth
        .bits()
        .iter()
        .zip(predicted.bits())
        .filter(|&(&a, &b)| a && !b)
        .count();
    Ok(RateOutcome::Rate(fn_cells as f64 / truth_cells as f64))
}
