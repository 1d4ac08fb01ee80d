//! Axis-aligned boxes in normalised image coordinates and the offset coding used
//! by the detector heads.

use crate::error::{Error, Result};

/// Corner-form box `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Centre-form box `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x_min + self.x_max),
            cy: 0.5 * (self.y_min + self.y_max),
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn clip_unit(&self) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, 1.0),
            y_min: self.y_min.clamp(0.0, 1.0),
            x_max: self.x_max.clamp(0.0, 1.0),
            y_max: self.y_max.clamp(0.0, 1.0),
        }
    }
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        CenterBox { cx, cy, w, h }
    }

    pub fn to_corners(&self) -> BBox {
        BBox {
            x_min: self.cx - 0.5 * self.w,
            y_min: self.cy - 0.5 * self.h,
            x_max: self.cx + 0.5 * self.w,
            y_max: self.cy + 0.5 * self.h,
        }
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target of `gt` relative to default box `anchor`:
/// `((g.cx - d.cx) / d.w, (g.cy - d.cy) / d.h, ln(g.w / d.w), ln(g.h / d.h))`.
pub fn encode(gt: &CenterBox, anchor: &CenterBox) -> Result<[f64; 4]> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::invalid(format!(
            "anchor has non-positive size {anchor:?}"
        )));
    }
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::invalid(format!("box has non-positive size {gt:?}")));
    }
    Ok([
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[f64; 4], anchor: &CenterBox) -> Result<CenterBox> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::invalid(format!(
            "anchor has non-positive size {anchor:?}"
        )));
    }
    Ok(CenterBox {
        cx: anchor.cx + offsets[0] * anchor.w,
        cy: anchor.cy + offsets[1] * anchor.h,
        w: anchor.w * offsets[2].exp(),
        h: anchor.h * offsets[3].exp(),
    })
}
