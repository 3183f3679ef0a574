//! Normalized boxes, IoU and non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Center-format box in normalized image coordinates: `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Corners clipped to the unit square.
    pub fn clamped(&self) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        Self::from_corners(
            x0.clamp(0.0, 1.0),
            y0.clamp(0.0, 1.0),
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
        )
    }

    /// Same center, sides multiplied by `gamma`.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            w: self.w * gamma,
            h: self.h * gamma,
            ..*self
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `[x_min, y_min, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        let (x0, y0, _, _) = self.corners();
        [x0, y0, self.w, self.h]
    }

    pub fn from_xywh(v: [f64; 4]) -> Self {
        Self::from_corners(v[0], v[1], v[0] + v[2], v[1] + v[3])
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored box proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Index into the class-name list the detector was queried with.
    pub category: usize,
    pub score: f64,
    /// Visual token that produced the detection.
    pub token: usize,
}

/// Greedy per-category NMS. Candidates are visited by score descending, ties
/// by token ascending; a candidate is dropped when its IoU with an already
/// kept box of the same category exceeds `iou_thresh`. The result keeps that
/// visiting order, so scores are non-increasing.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.token.cmp(&b.token))
            .then(a.category.cmp(&b.category))
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_and_disjoint() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = BBox::new(0.1, 0.1, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        let a = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
        let b = BBox::from_corners(0.1, 0.0, 0.3, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_best_per_category() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let near = BBox::new(0.51, 0.5, 0.2, 0.2);
        let dets = vec![
            Detection {
                bbox: near,
                category: 0,
                score: 0.7,
                token: 3,
            },
            Detection {
                bbox: b,
                category: 0,
                score: 0.9,
                token: 5,
            },
            Detection {
                bbox: b,
                category: 1,
                score: 0.8,
                token: 5,
            },
        ];
        let kept = nms(dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].category, 1);
    }

    #[test]
    fn nms_tie_breaks_by_token() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let dets = vec![
            Detection {
                bbox: b,
                category: 0,
                score: 0.9,
                token: 7,
            },
            Detection {
                bbox: b,
                category: 0,
                score: 0.9,
                token: 2,
            },
        ];
        assert_eq!(nms(dets, 0.5)[0].token, 2);
    }

    #[test]
    fn xywh_roundtrip() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.1);
        let back = BBox::from_xywh(b.to_xywh());
        assert!((back.cx - b.cx).abs() < 1e-15 && (back.h - b.h).abs() < 1e-15);
    }
}
