use crate::boxes::CenterBox;

/// Anchors per grid cell: a square of side `size`, then 2:1 and 1:2 boxes of equal area.
pub const ANCHORS_PER_CELL: usize = 3;

/// One prediction scale: a `rows x cols` grid of cells and the square anchor side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorScale {
    pub rows: usize,
    pub cols: usize,
    pub size: f64,
}

/// Default boxes for every prediction slot, ordered by scale, then cell (row-major),
/// then aspect ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    boxes: Vec<CenterBox>,
    scale_offsets: Vec<usize>,
}

impl AnchorSet {
    pub fn boxes(&self) -> &[CenterBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// First anchor index of each scale.
    pub fn scale_offsets(&self) -> &[usize] {
        &self.scale_offsets
    }
}

pub fn generate_anchors(scales: &[AnchorScale]) -> AnchorSet {
    let mut boxes = Vec::new();
    let mut scale_offsets = Vec::with_capacity(scales.len());
    let r2 = std::f64::consts::SQRT_2;
    for s in scales {
        scale_offsets.push(boxes.len());
        for row in 0..s.rows {
            for col in 0..s.cols {
                let cx = (col as f64 + 0.5) / s.cols as f64;
                let cy = (row as f64 + 0.5) / s.rows as f64;
                boxes.push(CenterBox::new(cx, cy, s.size, s.size));
                boxes.push(CenterBox::new(cx, cy, s.size * r2, s.size / r2));
                boxes.push(CenterBox::new(cx, cy, s.size / r2, s.size * r2));
            }
        }
    }
    AnchorSet {
        boxes,
        scale_offsets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell() {
        let a = generate_anchors(&[AnchorScale {
            rows: 1,
            cols: 1,
            size: 0.5,
        }]);
        assert_eq!(a.len(), 3);
        for b in a.boxes() {
            assert_eq!((b.cx, b.cy), (0.5, 0.5));
            assert!((b.w * b.h - 0.25).abs() < 1e-15);
        }
        assert!(a.boxes()[1].w > a.boxes()[1].h);
        assert!(a.boxes()[2].w < a.boxes()[2].h);
    }

    #[test]
    fn counts_and_determinism() {
        let scales = [
            AnchorScale {
                rows: 4,
                cols: 3,
                size: 0.2,
            },
            AnchorScale {
                rows: 2,
                cols: 2,
                size: 0.4,
            },
        ];
        let a = generate_anchors(&scales);
        assert_eq!(a.len(), (4 * 3 + 2 * 2) * ANCHORS_PER_CELL);
        assert_eq!(a.scale_offsets(), &[0, 36]);
        assert_eq!(a, generate_anchors(&scales));
        assert!(a.boxes().iter().all(|b| b.w > 0.0
            && b.h > 0.0
            && (0.0..=1.0).contains(&b.cx)
            && (0.0..=1.0).contains(&b.cy)));
        // second cell of the first row
        assert_eq!(a.boxes()[3].cx, 1.5 / 3.0);
        assert_eq!(a.boxes()[3].cy, 0.5 / 4.0);
    }
}
