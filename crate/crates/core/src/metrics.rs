//! Keypoint and mask metrics: mean end-point error, PCK and its AUC, IoU, F1.

use alloc::vec::Vec;

use crate::error::{contract, Result};

/// Number of thresholds in [`default_thresholds`].
pub const DEFAULT_THRESHOLD_COUNT: usize = 50;

/// Mask binarization threshold used by [`iou`] and [`f1`] in reports.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Fraction of keypoints within each error threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PckCurve {
    thresholds: Vec<f64>,
    values: Vec<f64>,
}

impl PckCurve {
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Metrics over one group of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumMetrics {
    pub samples: usize,
    pub mean_epe: f64,
    pub auc: f64,
    pub iou: f64,
    pub f1: f64,
}

/// Metrics over a whole test set, with clean and corrupted samples also
/// reported separately. A stratum with no samples is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub all: StratumMetrics,
    pub clean: Option<StratumMetrics>,
    pub corrupted: Option<StratumMetrics>,
}

/// Evenly spaced thresholds from 0 to half the unit square's diagonal.
pub fn default_thresholds() -> Vec<f64> {
    let top = core::f64::consts::SQRT_2 / 2.0;
    let last = (DEFAULT_THRESHOLD_COUNT - 1) as f64;
    (0..DEFAULT_THRESHOLD_COUNT)
        .map(|i| top * i as f64 / last)
        .collect()
}

/// Euclidean distance of each `dim`-dimensional keypoint pair.
pub fn keypoint_distances(pred: &[f64], gt: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(contract!("keypoint dimension must be >= 1"));
    }
    if pred.len() != gt.len() {
        return Err(contract!(
            "prediction has {} coordinates, ground truth {}",
            pred.len(),
            gt.len()
        ));
    }
    if pred.is_empty() || pred.len() % dim != 0 {
        return Err(contract!(
            "{} coordinates do not form whole {dim}-d keypoints",
            pred.len()
        ));
    }
    Ok(pred
        .chunks_exact(dim)
        .zip(gt.chunks_exact(dim))
        .map(|(p, t)| {
            let sq: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            libm::sqrt(sq)
        })
        .collect())
}

/// Mean Euclidean distance over every keypoint of every sample.
pub fn mean_epe(pred: &[f64], gt: &[f64], dim: usize) -> Result<f64> {
    let d = keypoint_distances(pred, gt, dim)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of keypoints with distance at most each threshold.
pub fn pck_curve(pred: &[f64], gt: &[f64], dim: usize, thresholds: &[f64]) -> Result<PckCurve> {
    let d = keypoint_distances(pred, gt, dim)?;
    pck_from_distances(&d, thresholds)
}

pub fn pck_from_distances(distances: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if thresholds.is_empty() {
        return Err(contract!("no thresholds"));
    }
    if thresholds.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(contract!("thresholds must be finite and non-negative"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract!("thresholds must be strictly ascending"));
    }
    if distances.is_empty() {
        return Err(contract!("no keypoints"));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let values = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&d| d <= t) as f64 / n)
        .collect();
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        values,
    })
}

/// Trapezoidal area under a PCK curve divided by its threshold span.
pub fn auc(curve: &PckCurve) -> Result<f64> {
    let t = &curve.thresholds;
    if t.len() < 2 {
        return Err(contract!("area needs at least two thresholds"));
    }
    let area: f64 = t
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(tw, vw)| 0.5 * (vw[0] + vw[1]) * (tw[1] - tw[0]))
        .sum();
    Ok(area / (t[t.len() - 1] - t[0]))
}

/// `(|A ∩ B|, |A|, |B|)` after binarizing both masks at `threshold`.
fn mask_counts(pred: &[f64], gt: &[f64], threshold: f64) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(contract!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        ));
    }
    let (mut both, mut a, mut b) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(gt) {
        let (p, t) = (p >= threshold, t >= threshold);
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    Ok((both, a, b))
}

/// Intersection over union of the binarized masks; 1 when both are empty.
pub fn iou(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    let (both, a, b) = mask_counts(pred, gt, threshold)?;
    let union = a + b - both;
    Ok(if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    })
}

/// Harmonic mean of precision and recall of the binarized masks; 1 when both
/// are empty, 0 when exactly one is.
pub fn f1(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    let (both, a, b) = mask_counts(pred, gt, threshold)?;
    Ok(match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (a + b) as f64,
    })
}

/// Per-sample inputs to a report: predicted and true keypoints plus the
/// predicted and true masks.
#[derive(Debug, Clone, Copy)]
pub struct SampleOutcome<'a> {
    pub pred_keypoints: &'a [f64],
    pub gt_keypoints: &'a [f64],
    pub pred_mask: &'a [f64],
    pub gt_mask: &'a [f64],
    pub corrupted: bool,
}

/// Aggregates a stratum. EPE and PCK pool all keypoints; IoU and F1 are
/// per-sample means.
pub fn stratum_metrics(
    samples: &[SampleOutcome<'_>],
    dim: usize,
    thresholds: &[f64],
) -> Result<StratumMetrics> {
    if samples.is_empty() {
        return Err(contract!("no samples to score"));
    }
    let mut distances = Vec::new();
    let (mut iou_sum, mut f1_sum) = (0.0, 0.0);
    for s in samples {
        distances.extend(keypoint_distances(s.pred_keypoints, s.gt_keypoints, dim)?);
        iou_sum += iou(s.pred_mask, s.gt_mask, MASK_THRESHOLD)?;
        f1_sum += f1(s.pred_mask, s.gt_mask, MASK_THRESHOLD)?;
    }
    let n = samples.len() as f64;
    let curve = pck_from_distances(&distances, thresholds)?;
    Ok(StratumMetrics {
        samples: samples.len(),
        mean_epe: distances.iter().sum::<f64>() / distances.len() as f64,
        auc: auc(&curve)?,
        iou: iou_sum / n,
        f1: f1_sum / n,
    })
}

/// Scores every sample, then the clean and corrupted subsets.
pub fn metric_report(
    samples: &[SampleOutcome<'_>],
    dim: usize,
    thresholds: &[f64],
) -> Result<MetricReport> {
    let all = stratum_metrics(samples, dim, thresholds)?;
    let subset = |flag: bool| -> Result<Option<StratumMetrics>> {
        let picked: Vec<SampleOutcome<'_>> = samples
            .iter()
            .filter(|s| s.corrupted == flag)
            .copied()
            .collect();
        if picked.is_empty() {
            Ok(None)
        } else {
            stratum_metrics(&picked, dim, thresholds).map(Some)
        }
    };
    Ok(MetricReport {
        all,
        clean: subset(false)?,
        corrupted: subset(true)?,
    })
}
