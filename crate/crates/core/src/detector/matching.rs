use super::AnchorSet;
use crate::boxes::{encode, iou, BBox};
use crate::error::{Error, Result};

/// Ground truth for one training sample: one box per frame of the sample (a single
/// box for frame-level training, `K` boxes for a tubelet) and a class in `1..=P`.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTarget {
    pub boxes: Vec<BBox>,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorMatch {
    pub gt_index: usize,
    pub class_id: usize,
}

/// Per-anchor label: `None` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    pub labels: Vec<Option<AnchorMatch>>,
}

impl MatchAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Mean per-frame IoU between a (static) anchor and a ground-truth box sequence.
pub fn anchor_gt_overlap(anchor: &BBox, gt: &GtTarget) -> f64 {
    gt.boxes.iter().map(|b| iou(anchor, b)).sum::<f64>() / gt.boxes.len() as f64
}

/// Assign anchors to ground truth.
///
/// Every anchor whose best overlap reaches `pos_iou` is positive for that ground
/// truth; in addition each ground truth claims its single best anchor. When several
/// ground truths share a best anchor, claims are made greedily by descending
/// overlap and the others take their best unclaimed anchor, so every ground truth
/// keeps one positive. Ties go to the lower index on both sides.
pub fn match_anchors(
    gt: &[GtTarget],
    anchors: &AnchorSet,
    pos_iou: f64,
) -> Result<MatchAssignment> {
    if !(pos_iou > 0.0 && pos_iou < 1.0) {
        return Err(Error::invalid(format!("pos_iou {pos_iou} outside (0, 1)")));
    }
    let corners: Vec<BBox> = anchors.boxes().iter().map(|a| a.to_corners()).collect();
    let mut labels = vec![None; corners.len()];
    if gt.is_empty() {
        return Ok(MatchAssignment { labels });
    }

    let overlap: Vec<Vec<f64>> = corners
        .iter()
        .map(|a| gt.iter().map(|g| anchor_gt_overlap(a, g)).collect())
        .collect();
    for (i, row) in overlap.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, &o) in row.iter().enumerate() {
            if o > best.0 {
                best = (o, j);
            }
        }
        if best.0 >= pos_iou {
            labels[i] = Some(AnchorMatch {
                gt_index: best.1,
                class_id: gt[best.1].class_id,
            });
        }
    }

    // Forced claims: repeatedly take the highest-overlap (anchor, ground truth) pair
    // among unclaimed anchors and unserved ground truths.
    let mut claimed = vec![false; corners.len()];
    let mut served = vec![false; gt.len()];
    for _ in 0..gt.len().min(corners.len()) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (j, _) in gt.iter().enumerate().filter(|(j, _)| !served[*j]) {
            for (i, row) in overlap.iter().enumerate() {
                if !claimed[i] && best.is_none_or(|(o, _, _)| row[j] > o) {
                    best = Some((row[j], i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        claimed[i] = true;
        served[j] = true;
        labels[i] = Some(AnchorMatch {
            gt_index: j,
            class_id: gt[j].class_id,
        });
    }
    Ok(MatchAssignment { labels })
}

/// Regression targets (`4 * K` per anchor, zeros for background anchors).
pub fn encode_targets(
    gt: &[GtTarget],
    anchors: &AnchorSet,
    assignment: &MatchAssignment,
) -> Result<Vec<f64>> {
    let k = gt.first().map_or(1, |g| g.boxes.len());
    let mut out = vec![0.0; anchors.len() * 4 * k];
    for (i, label) in assignment.labels.iter().enumerate() {
        if let Some(m) = label {
            let g = &gt[m.gt_index];
            for (f, b) in g.boxes.iter().enumerate() {
                let t = encode(&b.to_center(), &anchors.boxes()[i])?;
                out[i * 4 * k + 4 * f..i * 4 * k + 4 * f + 4].copy_from_slice(&t);
            }
        }
    }
    Ok(out)
}
