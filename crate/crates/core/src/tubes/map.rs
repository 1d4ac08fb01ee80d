use std::collections::BTreeSet;

use super::{tube_iou, ActionTube, GroundTruthTube};
use crate::error::{Error, Result};

/// The ten thresholds 0.50, 0.55, ..., 0.95 averaged for the "0.5:0.95" figure.
pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub per_class: Vec<ClassAp>,
    /// Unweighted mean over classes that have ground truth.
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub results: Vec<ThresholdResult>,
}

impl MapReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.threshold == threshold)
            .map(|r| r.map)
    }

    /// Mean of the per-threshold mAPs over all thresholds of the report.
    pub fn mean_map(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().map(|r| r.map).sum::<f64>() / self.results.len() as f64
    }
}

/// All-points interpolated AP of a ranked list of hits (`true` = true positive).
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Make precision monotonically non-increasing from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Video mAP of scored tubes against annotated tubes, one result per threshold.
///
/// Both lists pair each tube with its video id. Per class, tubes are visited by
/// descending score (ties keep input order); a tube is a hit when its best-overlap
/// unmatched annotation of the same class and video reaches the threshold, which
/// then consumes that annotation. Classes without annotations are left out of the
/// mean.
pub fn video_map(
    tubes: &[(String, ActionTube)],
    gts: &[(String, GroundTruthTube)],
    thresholds: &[f64],
) -> Result<MapReport> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1)")));
    }
    let gt_classes: BTreeSet<usize> = gts.iter().map(|(_, g)| g.class_id).collect();
    let det_classes: BTreeSet<usize> = tubes.iter().map(|(_, t)| t.class_id).collect();
    for c in det_classes.difference(&gt_classes) {
        log::warn!("class {c} has detections but no ground truth; excluded from mAP");
    }
    if gt_classes.is_empty() {
        log::warn!("no ground-truth tubes; mAP reported as 0");
    }

    let mut results = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut per_class = Vec::with_capacity(gt_classes.len());
        for &class_id in &gt_classes {
            let class_gt: Vec<&(String, GroundTruthTube)> =
                gts.iter().filter(|(_, g)| g.class_id == class_id).collect();
            let mut order: Vec<&(String, ActionTube)> = tubes
                .iter()
                .filter(|(_, t)| t.class_id == class_id)
                .collect();
            order.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut used = vec![false; class_gt.len()];
            let hits: Vec<bool> = order
                .iter()
                .map(|(vid, tube)| {
                    let mut best: Option<(f64, usize)> = None;
                    for (j, (gvid, g)) in class_gt.iter().enumerate() {
                        if used[j] || gvid != vid {
                            continue;
                        }
                        let o = tube_iou(tube, g);
                        if best.is_none_or(|(b, _)| o > b) {
                            best = Some((o, j));
                        }
                    }
                    match best {
                        Some((o, j)) if o >= threshold => {
                            used[j] = true;
                            true
                        }
                        _ => false,
                    }
                })
                .collect();
            per_class.push(ClassAp {
                class_id,
                ap: average_precision(&hits, class_gt.len()),
                num_gt: class_gt.len(),
                num_detections: order.len(),
            });
        }
        let map = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
        };
        results.push(ThresholdResult {
            threshold,
            per_class,
            map,
        });
    }
    Ok(MapReport { results })
}
