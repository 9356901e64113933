//! Detection boxes: suppression, importance filtering and the sidecar format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative area at which the size factor of the importance score saturates.
pub const AREA_CAP: f64 = 0.25;
pub const DEFAULT_MIN_IMPORTANCE: f64 = 0.1;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize, score: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h, score };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Geometry(format!("box {}x{} has zero extent", self.w, self.h)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Data(format!("box score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.w * self.h) as f64
    }

    /// Intersects the box with a `width × height` image.
    pub fn clamp_to(&self, width: usize, height: usize) -> Result<BoundingBox> {
        let x1 = (self.x + self.w).min(width);
        let y1 = (self.y + self.h).min(height);
        if self.x >= x1 || self.y >= y1 {
            return Err(Error::Geometry(format!(
                "box at ({}, {}) lies outside the {width}x{height} image",
                self.x, self.y
            )));
        }
        Ok(BoundingBox {
            w: x1 - self.x,
            h: y1 - self.y,
            ..*self
        })
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w).saturating_sub(self.x.max(other.x));
        let iy = (self.y + self.h).min(other.y + other.h).saturating_sub(self.y.max(other.y));
        let inter = (ix * iy) as f64;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Greedy non-maximum suppression. Boxes are visited by descending score,
/// equal scores in input order; a box survives if its IoU with every
/// survivor so far is at most `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Result<Vec<BoundingBox>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Parameter(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| k.iou(&boxes[i]) <= iou_threshold) {
            kept.push(boxes[i]);
        }
    }
    Ok(kept)
}

/// `score × centrality × min(1, (area / image_area) / AREA_CAP)`, where
/// centrality is one minus the distance from the box centre to the image
/// centre over the half-diagonal.
pub fn importance(b: &BoundingBox, image_w: usize, image_h: usize) -> f64 {
    let (iw, ih) = (image_w as f64, image_h as f64);
    let cx = b.x as f64 + b.w as f64 / 2.0;
    let cy = b.y as f64 + b.h as f64 / 2.0;
    let half_diag = 0.5 * iw.hypot(ih);
    let dist = (cx - iw / 2.0).hypot(cy - ih / 2.0);
    let centrality = (1.0 - dist / half_diag).max(0.0);
    let rel_area = (b.area() / (iw * ih) / AREA_CAP).min(1.0);
    b.score * centrality * rel_area
}

/// Keeps boxes whose importance reaches `min_importance`, in input order.
pub fn importance_filter(boxes: &[BoundingBox], image_w: usize, image_h: usize, min_importance: f64) -> Vec<BoundingBox> {
    boxes
        .iter()
        .filter(|b| importance(b, image_w, image_h) >= min_importance)
        .copied()
        .collect()
}

/// One line of the boxes sidecar: a detection in the named blurry image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image: String,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

/// Parses line-delimited JSON box records; blank lines are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("boxes line {}: {e}", i + 1)))?;
        rec.bbox
            .validate()
            .map_err(|e| Error::Data(format!("boxes line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text)
}
