//! Action tubes: linking detections over time and scoring tubes with video mAP.

mod link;
mod map;

pub use crate::boxes::iou as spatial_iou;
pub use link::{link_detections, link_tubelets, LinkConfig, LinkObjective};
pub use map::{average_precision, video_map, ClassAp, MapReport, ThresholdResult, COCO_THRESHOLDS};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// A linked, scored sequence of boxes on consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTube {
    pub class_id: usize,
    pub score: f64,
    pub start_frame: usize,
    pub boxes: Vec<BBox>,
}

/// Annotated tube: one box on each of a run of consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTube {
    pub class_id: usize,
    pub start_frame: usize,
    pub boxes: Vec<BBox>,
}

fn check_boxes(boxes: &[BBox]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::invalid("a tube needs at least one box"));
    }
    if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(Error::invalid(format!("degenerate tube box {b:?}")));
    }
    Ok(())
}

impl ActionTube {
    pub fn new(class_id: usize, score: f64, start_frame: usize, boxes: Vec<BBox>) -> Result<Self> {
        check_boxes(&boxes)?;
        Ok(ActionTube {
            class_id,
            score,
            start_frame,
            boxes,
        })
    }

    /// One past the last frame.
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }
}

impl GroundTruthTube {
    pub fn new(class_id: usize, start_frame: usize, boxes: Vec<BBox>) -> Result<Self> {
        check_boxes(&boxes)?;
        Ok(GroundTruthTube {
            class_id,
            start_frame,
            boxes,
        })
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }

    /// The annotation viewed as a perfect detection with the given score.
    pub fn as_detection(&self, score: f64) -> ActionTube {
        ActionTube {
            class_id: self.class_id,
            score,
            start_frame: self.start_frame,
            boxes: self.boxes.clone(),
        }
    }
}

/// Mean spatial IoU over the union of the two temporal extents; frames covered by
/// only one of the sequences count as 0.
pub fn sequence_iou(start_a: usize, a: &[BBox], start_b: usize, b: &[BBox]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let lo = start_a.min(start_b);
    let hi = (start_a + a.len()).max(start_b + b.len());
    let shared_lo = start_a.max(start_b);
    let shared_hi = (start_a + a.len()).min(start_b + b.len());
    let mut sum = 0.0;
    for f in shared_lo..shared_hi {
        sum += spatial_iou(&a[f - start_a], &b[f - start_b]);
    }
    sum / (hi - lo) as f64
}

pub fn tube_iou(a: &ActionTube, b: &GroundTruthTube) -> f64 {
    sequence_iou(a.start_frame, &a.boxes, b.start_frame, &b.boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(start: usize, len: usize) -> Vec<BBox> {
        (start..start + len)
            .map(|f| {
                let dx = 0.01 * f as f64;
                BBox::new(0.1 + dx, 0.1, 0.4 + dx, 0.4)
            })
            .collect()
    }

    #[test]
    fn union_normalised_iou() {
        let a = tube(0, 10);
        let g = GroundTruthTube::new(1, 0, a[..5].to_vec()).unwrap();
        let t = ActionTube::new(1, 0.5, 0, a.clone()).unwrap();
        assert!((tube_iou(&t, &g) - 0.5).abs() < 1e-15);
        assert_eq!(tube_iou(&t, &GroundTruthTube::new(1, 0, a).unwrap()), 1.0);
        let later = GroundTruthTube::new(1, 10, tube(10, 3)).unwrap();
        assert_eq!(tube_iou(&t, &later), 0.0);
    }

    #[test]
    fn unit_square_half() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(spatial_iou(&a, &BBox::new(0.0, 0.0, 1.0, 0.5)), 0.5);
    }

    #[test]
    fn box_lookup() {
        let g = GroundTruthTube::new(2, 3, tube(3, 2)).unwrap();
        assert!(g.box_at(2).is_none());
        assert!(g.box_at(4).is_some());
        assert!(g.box_at(5).is_none());
        assert_eq!(g.end_frame(), 5);
        assert!(GroundTruthTube::new(1, 0, vec![]).is_err());
    }
}
