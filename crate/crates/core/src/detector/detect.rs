//! Turning head outputs into scored boxes: thresholding, decoding, NMS and
//! late fusion of two streams.

use std::cmp::Ordering;

use super::{AnchorSet, ClipInput, Detector, Predictions};
use crate::boxes::{decode, iou, BBox};
use crate::error::{Error, Result};

/// Post-processing thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    /// Minimum class probability for a candidate.
    pub conf_thresh: f64,
    /// Candidates overlapping a kept box by more than this are suppressed.
    pub nms_iou: f64,
    /// Maximum number of detections kept per frame (or per clip for tubelets).
    pub top_k: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            conf_thresh: 0.01,
            nms_iou: 0.45,
            top_k: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub frame_index: usize,
    pub anchor: usize,
}

/// One anchor cuboid: a class score shared by `K` consecutive boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeletDetection {
    pub boxes: Vec<BBox>,
    pub class_id: usize,
    pub score: f64,
    pub start_frame: usize,
    pub anchor: usize,
}

/// Mean per-frame IoU of two equally long box sequences.
pub fn mean_iou(a: &[BBox], b: &[BBox]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| iou(x, y)).sum::<f64>() / a.len() as f64
}

fn by_score_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Greedy non-maximum suppression.
///
/// `items` are `(score, index)` pairs; `overlap(i, j)` compares positions `i` and
/// `j` of `items`. Returns kept positions ordered by score descending then index
/// ascending.
pub fn nms_by<F>(items: &[(f64, usize)], thresh: f64, mut overlap: F) -> Vec<usize>
where
    F: FnMut(usize, usize) -> f64,
{
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| by_score_then_index(items[a], items[b]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| overlap(k, i) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

/// NMS over single boxes; returns kept positions in `boxes`.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let items: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    nms_by(&items, thresh, |a, b| iou(&boxes[a], &boxes[b]))
}

/// Decode, threshold and suppress the predictions of one clip.
///
/// Boxes are clipped to the unit square; candidates whose clipped box is empty in
/// any frame are dropped. NMS runs per class with mean per-frame IoU, then the
/// survivors of all classes are merged, ordered by (score desc, anchor asc) and cut
/// to `top_k`.
pub fn tubelets_from_predictions(
    pred: &Predictions,
    anchors: &AnchorSet,
    start_frame: usize,
    params: &DetectParams,
) -> Result<Vec<TubeletDetection>> {
    let q = pred.num_anchors();
    if q != anchors.len() || pred.offsets.len() != q * 4 * pred.tubelet_len {
        return Err(Error::shape(format!(
            "predictions cover {q} anchors, anchor set has {}",
            anchors.len()
        )));
    }
    let k = pred.tubelet_len;
    let mut decoded: Vec<Option<Vec<BBox>>> = vec![None; q];
    let mut out = Vec::new();
    for class_id in 1..=pred.num_classes {
        let mut cands = Vec::new();
        for (a, anchor) in anchors.boxes().iter().enumerate() {
            let s = pred.score(a, class_id);
            if s < params.conf_thresh {
                continue;
            }
            if decoded[a].is_none() {
                let mut boxes = Vec::with_capacity(k);
                for f in 0..k {
                    boxes.push(
                        decode(&pred.offsets_for(a, f), anchor)?
                            .to_corners()
                            .clip_unit(),
                    );
                }
                decoded[a] = Some(boxes);
            }
            let boxes = decoded[a].as_ref().unwrap();
            if boxes.iter().all(BBox::is_valid) {
                cands.push((s, a));
            }
        }
        let kept = nms_by(&cands, params.nms_iou, |i, j| {
            mean_iou(
                decoded[cands[i].1].as_ref().unwrap(),
                decoded[cands[j].1].as_ref().unwrap(),
            )
        });
        for i in kept {
            let (score, anchor) = cands[i];
            out.push(TubeletDetection {
                boxes: decoded[anchor].clone().unwrap(),
                class_id,
                score,
                start_frame,
                anchor,
            });
        }
    }
    out.sort_by(|a, b| {
        by_score_then_index((a.score, a.anchor), (b.score, b.anchor))
            .then(a.class_id.cmp(&b.class_id))
    });
    out.truncate(params.top_k);
    Ok(out)
}

/// Frame-level detections of single-frame predictions.
pub fn detections_from_predictions(
    pred: &Predictions,
    anchors: &AnchorSet,
    frame_index: usize,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    if pred.tubelet_len != 1 {
        return Err(Error::invalid(format!(
            "frame-level decoding needs single-frame predictions, got K = {}",
            pred.tubelet_len
        )));
    }
    Ok(
        tubelets_from_predictions(pred, anchors, frame_index, params)?
            .into_iter()
            .map(|t| Detection {
                bbox: t.boxes[0],
                class_id: t.class_id,
                score: t.score,
                frame_index,
                anchor: t.anchor,
            })
            .collect(),
    )
}

/// Average the class scores of two streams over the same anchors; box offsets come
/// from `appearance`.
pub fn fuse_two_stream(appearance: &Predictions, motion: &Predictions) -> Result<Predictions> {
    if appearance.scores.len() != motion.scores.len()
        || appearance.num_classes != motion.num_classes
        || appearance.tubelet_len != motion.tubelet_len
    {
        return Err(Error::shape(format!(
            "cannot fuse {} anchors x {} classes with {} anchors x {} classes",
            appearance.num_anchors(),
            appearance.num_classes + 1,
            motion.num_anchors(),
            motion.num_classes + 1
        )));
    }
    Ok(Predictions {
        scores: appearance
            .scores
            .iter()
            .zip(&motion.scores)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
        offsets: appearance.offsets.clone(),
        num_classes: appearance.num_classes,
        tubelet_len: appearance.tubelet_len,
    })
}

/// A single detector or a late-fused pair sharing one anchor layout.
#[derive(Clone, Debug)]
pub enum DetectionModel {
    Single(Detector),
    TwoStream {
        appearance: Detector,
        motion: Detector,
    },
}

impl DetectionModel {
    pub fn two_stream(appearance: Detector, motion: Detector) -> Result<Self> {
        if appearance.anchors() != motion.anchors()
            || appearance.config().tubelet_len != motion.config().tubelet_len
            || appearance.config().num_classes != motion.config().num_classes
        {
            return Err(Error::Config(
                "two-stream detectors must share anchors, K and classes".into(),
            ));
        }
        Ok(DetectionModel::TwoStream { appearance, motion })
    }

    pub fn primary(&self) -> &Detector {
        match self {
            DetectionModel::Single(d) => d,
            DetectionModel::TwoStream { appearance, .. } => appearance,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            DetectionModel::Single(d) => d.parameter_count(),
            DetectionModel::TwoStream { appearance, motion } => {
                appearance.parameter_count() + motion.parameter_count()
            }
        }
    }

    pub fn tubelet_len(&self) -> usize {
        self.primary().config().tubelet_len
    }

    pub fn predict(&self, input: &ClipInput<'_>) -> Result<Predictions> {
        match self {
            DetectionModel::Single(d) => d.predict(input),
            DetectionModel::TwoStream { appearance, motion } => {
                fuse_two_stream(&appearance.predict(input)?, &motion.predict(input)?)
            }
        }
    }

    /// Detections on the first `K` frames of `input` (K = 1 gives frame-level output).
    pub fn detect_tubelet(
        &self,
        input: &ClipInput<'_>,
        start_frame: usize,
        params: &DetectParams,
    ) -> Result<Vec<TubeletDetection>> {
        let pred = self.predict(input)?;
        tubelets_from_predictions(&pred, self.primary().anchors(), start_frame, params)
    }

    pub fn detect(
        &self,
        input: &ClipInput<'_>,
        frame_index: usize,
        params: &DetectParams,
    ) -> Result<Vec<Detection>> {
        let pred = self.predict(input)?;
        detections_from_predictions(&pred, self.primary().anchors(), frame_index, params)
    }

    /// Run over every clip start of a video. `rgb` and `flow` hold one tensor per
    /// frame; either may be empty if the model does not use it. Returns one entry
    /// per start frame `0..=T-K`.
    pub fn detect_video(
        &self,
        rgb: &[crate::numerics::Tensor],
        flow: &[crate::numerics::Tensor],
        params: &DetectParams,
    ) -> Result<Vec<Vec<TubeletDetection>>> {
        let k = self.tubelet_len();
        let t = rgb.len().max(flow.len());
        if t < k {
            return Err(Error::invalid(format!(
                "video has {t} frames, clip length is {k}"
            )));
        }
        (0..=t - k)
            .map(|s| {
                let input = ClipInput {
                    rgb: rgb.get(s..s + k).unwrap_or(&[]),
                    flow: flow.get(s..s + k).unwrap_or(&[]),
                };
                self.detect_tubelet(&input, s, params)
            })
            .collect()
    }
}
