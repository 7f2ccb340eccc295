//! Object validation: how much of each detection's box lies in the salient
//! region, weighted by detector confidence.
//!
//! A pixel `(row, col)` belongs to a box `(x, y, w, h)` iff its center lies in
//! the half-open box: `x <= col + 0.5 < x + w` and `y <= row + 0.5 < y + h`.
//! The overlap score is the fraction of the box's pixels that are set in the
//! mask, so it is always an exact ratio `k / n`.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("no pixel center falls inside the box of '{label}' {bbox:?}")]
    DegenerateBbox { label: String, bbox: BoundingBox },
    #[error("box of '{label}' {bbox:?} exceeds the {width}x{height} mask")]
    OutsideMask {
        label: String,
        bbox: BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("threshold {name}={value} is outside [0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },
}

/// Axis-aligned box in pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    /// Whether the pixel centered at `(col + 0.5, row + 0.5)` is inside.
    pub fn contains_pixel(&self, row: u32, col: u32) -> bool {
        let cx = f64::from(col) + 0.5;
        let cy = f64::from(row) + 0.5;
        self.x <= cx && cx < self.x + self.w && self.y <= cy && cy < self.y + self.h
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= width
            && self.y + self.h <= height
    }

    /// Columns whose centers fall in `[x, x + w)`, clipped to `0..limit`.
    fn columns(&self, limit: u32) -> Range<u32> {
        center_range(self.x, self.w, limit)
    }

    fn rows(&self, limit: u32) -> Range<u32> {
        center_range(self.y, self.h, limit)
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BoundingBox { x, y, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Pixel indices `i` in `0..limit` with `start <= i + 0.5 < start + len`.
fn center_range(start: f64, len: f64, limit: u32) -> Range<u32> {
    let end = start + len;
    let inside_lo = |i: i64| start <= i as f64 + 0.5;
    let inside_hi = |i: i64| (i as f64 + 0.5) < end;

    // ceil(start - 0.5) is off by at most one after rounding; settle it with
    // the exact predicate.
    let mut lo = (start - 0.5).ceil() as i64;
    while !inside_lo(lo) {
        lo += 1;
    }
    while inside_lo(lo - 1) {
        lo -= 1;
    }
    let mut hi = (end - 0.5).ceil() as i64;
    while hi > lo && !inside_hi(hi - 1) {
        hi -= 1;
    }
    while inside_hi(hi) {
        hi += 1;
    }
    let lo = lo.clamp(0, i64::from(limit)) as u32;
    let hi = hi.clamp(0, i64::from(limit)) as u32;
    lo..hi.max(lo)
}

/// One object detector output. `confidence` is the detector's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

impl Detection {
    pub fn new(label: impl Into<String>, confidence: f64, bbox: BoundingBox) -> Self {
        Detection {
            label: label.into(),
            confidence,
            bbox,
        }
    }
}

/// All detections of one image, validated against its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    /// Detections with confidence strictly above `t_c`, in input order.
    pub fn above_confidence(&self, t_c: f64) -> impl Iterator<Item = &Detection> {
        self.detections.iter().filter(move |d| d.confidence > t_c)
    }
}

/// A detection that passed both the confidence and relevance gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidatedObject {
    pub label: String,
    pub overlap_score: f64,
    pub relevance_score: f64,
    pub detection: Detection,
}

/// Fraction of the box's pixels that are set in the mask.
pub fn overlap_score(mask: &BinaryMask, det: &Detection) -> Result<f64, ValidationError> {
    let (w, h) = (mask.width(), mask.height());
    if !det.bbox.fits_within(f64::from(w), f64::from(h)) {
        return Err(ValidationError::OutsideMask {
            label: det.label.clone(),
            bbox: det.bbox,
            width: w,
            height: h,
        });
    }
    let rows = det.bbox.rows(h);
    let cols = det.bbox.columns(w);
    let total = rows.len() * cols.len();
    if total == 0 {
        return Err(ValidationError::DegenerateBbox {
            label: det.label.clone(),
            bbox: det.bbox,
        });
    }
    let bits = mask.bits();
    let stride = w as usize;
    let covered: usize = rows
        .map(|r| {
            let start = r as usize * stride;
            bits[start + cols.start as usize..start + cols.end as usize]
                .iter()
                .filter(|&&b| b)
                .count()
        })
        .sum();
    Ok(covered as f64 / total as f64)
}

/// A detection paired with its precomputed overlap score. `overlap` is `None`
/// for boxes that contain no pixel center.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDetection {
    pub detection: Detection,
    pub overlap: Option<f64>,
}

/// Scores every detection against the mask once, so that threshold sweeps
/// can reuse the result.
pub fn score_detections(
    mask: &BinaryMask,
    detections: &[Detection],
) -> Result<Vec<ScoredDetection>, ValidationError> {
    detections
        .iter()
        .map(|det| match overlap_score(mask, det) {
            Ok(os) => Ok(ScoredDetection {
                detection: det.clone(),
                overlap: Some(os),
            }),
            Err(ValidationError::DegenerateBbox { .. }) => Ok(ScoredDetection {
                detection: det.clone(),
                overlap: None,
            }),
            Err(e) => Err(e),
        })
        .collect()
}

fn check_threshold(name: &'static str, value: f64) -> Result<(), ValidationError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ValidationError::InvalidThreshold { name, value })
    }
}

/// Detections with `confidence > t_c` and `confidence * overlap > t_r`,
/// most relevant first.
pub fn validate_objects(
    mask: &BinaryMask,
    detections: &[Detection],
    t_c: f64,
    t_r: f64,
) -> Result<Vec<ValidatedObject>, ValidationError> {
    check_threshold("t_c", t_c)?;
    check_threshold("t_r", t_r)?;
    let mut scored = Vec::new();
    for det in detections.iter().filter(|d| d.confidence > t_c) {
        scored.push(ScoredDetection {
            detection: det.clone(),
            overlap: Some(overlap_score(mask, det)?),
        });
    }
    validate_scored(&scored, t_c, t_r)
}

/// Same gates as [`validate_objects`] over precomputed overlap scores.
pub fn validate_scored(
    scored: &[ScoredDetection],
    t_c: f64,
    t_r: f64,
) -> Result<Vec<ValidatedObject>, ValidationError> {
    check_threshold("t_c", t_c)?;
    check_threshold("t_r", t_r)?;
    let mut out = Vec::new();
    for s in scored.iter().filter(|s| s.detection.confidence > t_c) {
        let os = s.overlap.ok_or_else(|| ValidationError::DegenerateBbox {
            label: s.detection.label.clone(),
            bbox: s.detection.bbox,
        })?;
        let rs = s.detection.confidence * os;
        if rs > t_r {
            out.push(ValidatedObject {
                label: s.detection.label.clone(),
                overlap_score: os,
                relevance_score: rs,
                detection: s.detection.clone(),
            });
        }
    }
    // stable: equal (score, label) keep input order
    out.sort_by(|a, b| {
        b.relevance_score
            .total_cmp(&a.relevance_score)
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(out)
}
