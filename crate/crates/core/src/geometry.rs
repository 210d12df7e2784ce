//! Axis-aligned boxes in center/size form and the overlap measures built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boxes narrower or shorter than this (in pixels) after clamping are dropped.
pub const MIN_BOX_SIZE: f64 = 0.5;

/// An axis-aligned box stored as center and size, in pixels.
///
/// Serialized as the array `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    /// Builds a box, rejecting non-finite fields and non-positive sizes.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        match b.defect() {
            None => Ok(b),
            Some(reason) => Err(Error::InvalidBox { cx, cy, w, h, reason }),
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Describes the first broken invariant, if any.
    pub fn defect(&self) -> Option<&'static str> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            Some("non-finite coordinate")
        } else if self.w <= 0.0 {
            Some("width must be positive")
        } else if self.h <= 0.0 {
            Some("height must be positive")
        } else {
            None
        }
    }

    pub fn is_valid(&self) -> bool {
        self.defect().is_none()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    /// Clips the box to `[0, width] x [0, height]`.
    ///
    /// Returns `None` when the clipped box is `MIN_BOX_SIZE` or thinner in
    /// either direction.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let (x1, y1, x2, y2) = self.corners();
        let x1 = x1.clamp(0.0, width);
        let x2 = x2.clamp(0.0, width);
        let y1 = y1.clamp(0.0, height);
        let y2 = y2.clamp(0.0, height);
        if x2 - x1 <= MIN_BOX_SIZE || y2 - y1 <= MIN_BOX_SIZE {
            return None;
        }
        Some(BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        })
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        const SLACK: f64 = 1e-9;
        x1 >= -SLACK && y1 >= -SLACK && x2 <= width + SLACK && y2 <= height + SLACK
    }

    /// Scales every coordinate and size by `s`.
    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enclosing <= 0.0 {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

/// `1 - giou(a, b)`, in `[0, 2]`.
pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

/// Sum of absolute differences over `(cx, cy, w, h)`.
pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}
