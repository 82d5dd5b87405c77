//! Single-class detection metrics: IoU, greedy matching, precision, recall
//! and interpolated average precision.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::DegenerateBox);
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return Ok(0.0);
    }
    let inter = iw * ih;
    Ok((inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0))
}

/// A scored detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// One image's ground truth and detections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageRecord {
    pub id: String,
    pub gts: Vec<BBox>,
    pub dets: Vec<Detection>,
}

/// A detection with the image it belongs to (the flat form of
/// [`ImageRecord`]s).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidConfig(alloc::format!(
                "detection score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(image index, detection index)` in ranking order (score descending,
    /// ties by input order) with its TP flag.
    pub ranked: Vec<(usize, usize, bool)>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

/// Detection indices across all images sorted by descending score; ties keep
/// input order (image order, then detection order).
pub fn rank_detections(images: &[ImageRecord]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.dets.len()).map(move |d| (i, d)))
        .collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&(ia, da), &(ib, db)| {
        let sa = images[ia].dets[da].score;
        let sb = images[ib].dets[db].score;
        sb.partial_cmp(&sa).unwrap_or(core::cmp::Ordering::Equal)
    });
    order
}

/// Greedy matching: in ranking order each detection claims the unmatched
/// ground truth of highest IoU `>= thr` in its image.
pub fn match_greedy(images: &[ImageRecord], thr: f64) -> Result<MatchResult> {
    if !(thr > 0.0 && thr <= 1.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "IoU threshold {thr} outside (0, 1]"
        )));
    }
    let mut claimed: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut result = MatchResult::default();
    for (i, d) in rank_detections(images) {
        let det = &images[i].dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in images[i].gts.iter().enumerate() {
            if claimed[i][g] {
                continue;
            }
            let o = iou(&det.bbox, gt)?;
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        let hit = if let Some((g, _)) = best {
            claimed[i][g] = true;
            true
        } else {
            false
        };
        if hit {
            result.tp += 1;
        } else {
            result.fp += 1;
        }
        result.ranked.push((i, d, hit));
    }
    result.fn_ = claimed.iter().flatten().filter(|c| !**c).count();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// `TP + FP == 0`; precision reported as 0.
    pub precision_degenerate: bool,
    /// `TP + FN == 0`; recall reported as 0.
    pub recall_degenerate: bool,
}

/// `P = TP / (TP + FP)`, `R = TP / (TP + FN)`; `0/0` yields 0 with a flag.
pub fn precision_recall(c: Counts) -> PrecisionRecall {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    PrecisionRecall {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        precision_degenerate: c.tp + c.fp == 0,
        recall_degenerate: c.tp + c.fn_ == 0,
    }
}

/// Area under the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0.00, 0.01, ..., 1.00.
    #[default]
    Interp101,
    /// Exact area under the monotone precision envelope.
    Continuous,
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(images: &[ImageRecord], thr: f64) -> Result<Vec<(f64, f64)>> {
    let total_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if total_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let m = match_greedy(images, thr)?;
    let mut tp = 0usize;
    Ok(m.ranked
        .iter()
        .enumerate()
        .map(|(k, &(_, _, hit))| {
            tp += usize::from(hit);
            (tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect())
}

pub fn average_precision(images: &[ImageRecord], thr: f64) -> Result<f64> {
    average_precision_with(images, thr, ApMethod::Interp101)
}

pub fn average_precision_with(images: &[ImageRecord], thr: f64, method: ApMethod) -> Result<f64> {
    let curve = pr_curve(images, thr)?;
    // envelope[k] = max precision at any point from k onwards
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    Ok(match method {
        ApMethod::Interp101 => {
            let mut total = 0.0;
            let mut k = 0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                while k < curve.len() && curve[k].0 < level {
                    k += 1;
                }
                if k < curve.len() {
                    total += envelope[k];
                }
            }
            total / 101.0
        }
        ApMethod::Continuous => {
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (k, &(r, _)) in curve.iter().enumerate() {
                area += (r - prev_recall) * envelope[k];
                prev_recall = r;
            }
            area
        }
    })
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub ap_50: f64,
    pub ap_50_95: f64,
    /// `(threshold, AP)` for each of [`coco_thresholds`].
    pub per_threshold: Vec<(f64, f64)>,
}

/// `(threshold, AP)` pairs.
pub type PerThreshold = Vec<(f64, f64)>;

/// AP at 0.5, the mean over the ten thresholds, and AP at each.
pub fn ap_range(images: &[ImageRecord]) -> Result<(f64, f64, PerThreshold)> {
    let per: PerThreshold = coco_thresholds()
        .into_iter()
        .map(|t| average_precision(images, t).map(|ap| (t, ap)))
        .collect::<Result<_>>()?;
    let mean = per.iter().map(|(_, ap)| ap).sum::<f64>() / per.len() as f64;
    Ok((per[0].1, mean, per))
}

/// Full report: P/R among detections scoring at least `conf` matched at
/// `iou_thr`, plus the AP aggregates over all detections.
pub fn evaluate(images: &[ImageRecord], iou_thr: f64, conf: f64) -> Result<EvalReport> {
    let (ap_50, ap_50_95, per_threshold) = ap_range(images)?;
    let filtered: Vec<ImageRecord> = images
        .iter()
        .map(|im| ImageRecord {
            id: im.id.clone(),
            gts: im.gts.clone(),
            dets: im
                .dets
                .iter()
                .filter(|d| d.score >= conf)
                .copied()
                .collect(),
        })
        .collect();
    let pr = precision_recall(match_greedy(&filtered, iou_thr)?.counts());
    Ok(EvalReport {
        iou_threshold: iou_thr,
        conf_threshold: conf,
        precision: pr.precision,
        recall: pr.recall,
        precision_degenerate: pr.precision_degenerate,
        recall_degenerate: pr.recall_degenerate,
        ap_50,
        ap_50_95,
        per_threshold,
    })
}
