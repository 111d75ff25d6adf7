//! Axis-aligned boxes, IoU, invertible box transforms and greedy NMS.
//!
//! Boxes are corner-encoded with continuous coordinates. Width/height
//! encodings only appear at file boundaries (see [`BBox::from_xywh`]).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min <= x_max && y_min <= y_max).then_some(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// True when `self` lies within `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &BBox) -> f64 {
        (self.x_min - other.x_min)
            .abs()
            .max((self.y_min - other.y_min).abs())
            .max((self.x_max - other.x_max).abs())
            .max((self.y_max - other.y_max).abs())
    }
}

/// Intersection over union. Zero-area boxes score 0 against everything
/// except an identical box, which scores 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = match a.intersection(b) {
        Some(i) => i.area(),
        None => return 0.0,
    };
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeomTransform {
    Scale { factor: f64 },
    HorizontalFlip { width: f64 },
    TileOffset { dx: f64, dy: f64 },
}

impl GeomTransform {
    pub fn apply(&self, b: &BBox) -> BBox {
        match *self {
            GeomTransform::Scale { factor } => BBox {
                x_min: b.x_min * factor,
                y_min: b.y_min * factor,
                x_max: b.x_max * factor,
                y_max: b.y_max * factor,
            },
            GeomTransform::HorizontalFlip { width } => BBox {
                x_min: width - b.x_max,
                y_min: b.y_min,
                x_max: width - b.x_min,
                y_max: b.y_max,
            },
            GeomTransform::TileOffset { dx, dy } => b.translate(dx, dy),
        }
    }

    pub fn inverse(&self, b: &BBox) -> BBox {
        match *self {
            GeomTransform::Scale { factor } => BBox {
                x_min: b.x_min / factor,
                y_min: b.y_min / factor,
                x_max: b.x_max / factor,
                y_max: b.y_max / factor,
            },
            // a flip is its own inverse
            GeomTransform::HorizontalFlip { .. } => self.apply(b),
            GeomTransform::TileOffset { dx, dy } => b.translate(-dx, -dy),
        }
    }

    /// Short stable identifier recorded in detection provenance.
    pub fn id(&self) -> String {
        match *self {
            GeomTransform::Scale { factor } => format!("scale({factor})"),
            GeomTransform::HorizontalFlip { width } => format!("hflip({width})"),
            GeomTransform::TileOffset { dx, dy } => format!("tile({dx},{dy})"),
        }
    }
}

/// Descending by score; equal scores keep the lower original index first.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Single-class greedy NMS. Returns kept indices sorted by descending score.
/// A box is suppressed when its IoU with an already kept box exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores differ in length");
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// NMS applied independently per group label. Output indices are ordered by
/// descending score with index tie-break, across all groups.
pub fn batched_nms(boxes: &[BBox], scores: &[f64], groups: &[u32], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), groups.len(), "boxes and groups differ in length");
    let mut by_group: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut kept = Vec::new();
    for members in by_group.values() {
        let sub_boxes: Vec<BBox> = members.iter().map(|&i| boxes[i]).collect();
        let sub_scores: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
        kept.extend(nms(&sub_boxes, &sub_scores, iou_threshold).into_iter().map(|j| members[j]));
    }
    let kept_scores: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
    let mut order: Vec<(usize, f64)> = kept.into_iter().zip(kept_scores).collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i).collect()
}
