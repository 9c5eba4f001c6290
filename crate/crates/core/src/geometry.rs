//! Axis-aligned box arithmetic: IoU, delta coding, NMS and greedy matching.
//!
//! Boxes are corner-style `(x1, y1, x2, y2)` in pixel coordinates with
//! `width = x2 - x1` (no `+1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound applied to the width/height deltas before exponentiation.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn has_positive_size(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    /// Clamps all coordinates into `[0, width] x [0, height]`.
    pub fn clip(&self, image_size: (f64, f64)) -> Self {
        let (w, h) = image_size;
        Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// A detection: box, confidence and foreground class id (>= 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// A ground-truth box with its foreground class id (>= 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression targets mapping `proposal` onto `gt`, normalized by `stds`.
pub fn encode_deltas(proposal: &BBox, gt: &BBox, stds: [f64; 4]) -> Result<[f64; 4]> {
    if !proposal.has_positive_size() {
        return Err(Error::InvalidBox(format!("proposal {proposal:?} has non-positive size")));
    }
    if !gt.has_positive_size() {
        return Err(Error::InvalidBox(format!("target {gt:?} has non-positive size")));
    }
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let (gx, gy) = gt.center();
    let (gw, gh) = (gt.width(), gt.height());
    Ok([
        (gx - px) / pw / stds[0],
        (gy - py) / ph / stds[1],
        (gw / pw).ln() / stds[2],
        (gh / ph).ln() / stds[3],
    ])
}

/// Inverse of [`encode_deltas`] without clipping; the size deltas are clamped
/// to [`DELTA_CLAMP`].
pub fn apply_deltas(proposal: &BBox, deltas: [f64; 4], stds: [f64; 4]) -> BBox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let dx = deltas[0] * stds[0];
    let dy = deltas[1] * stds[1];
    let dw = (deltas[2] * stds[2]).min(DELTA_CLAMP);
    let dh = (deltas[3] * stds[3]).min(DELTA_CLAMP);
    BBox::from_center(px + dx * pw, py + dy * ph, pw * dw.exp(), ph * dh.exp())
}

/// Applies `deltas` to `proposal` and clips the result to the image.
pub fn decode_deltas(proposal: &BBox, deltas: [f64; 4], stds: [f64; 4], image_size: (f64, f64)) -> BBox {
    apply_deltas(proposal, deltas, stds).clip(image_size)
}

fn by_score_then_index(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps lower original index first among equal scores.
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy per-class non-maximum suppression.
///
/// Boxes are visited by descending score (ties: lower input index first); a box
/// is dropped when it overlaps an already kept box of the same class with
/// IoU strictly above `iou_threshold`. Output is sorted by descending score.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let order = by_score_then_index(dets);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Per-detection match outcome from [`match_to_gt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub true_positive: bool,
    /// Index into the ground-truth list when matched.
    pub gt_index: Option<usize>,
}

/// Greedy score-ordered matching of detections to ground truth.
///
/// Returns one entry per input detection, in input order. A detection is a
/// true positive when an unmatched ground truth of its class has
/// IoU >= `iou_threshold`; the highest-IoU such box is consumed.
pub fn match_to_gt(dets: &[ScoredBox], gts: &[LabeledBox], iou_threshold: f64) -> Vec<Match> {
    let order = by_score_then_index(dets);
    let mut taken = vec![false; gts.len()];
    let mut out = vec![
        Match {
            true_positive: false,
            gt_index: None
        };
        dets.len()
    ];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != dets[d].class_id {
                continue;
            }
            let overlap = iou(&dets[d].bbox, &gt.bbox);
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Match {
                true_positive: true,
                gt_index: Some(g),
            };
        }
    }
    out
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub det: ScoredBox,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpRow {
    image_id: u64,
    class_id: usize,
    score: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

/// Header of the detection dump: a CSV file with one detection per row.
pub const DUMP_HEADER: [&str; 7] = ["image_id", "class_id", "score", "x1", "y1", "x2", "y2"];

pub fn write_detection_dump(path: &std::path::Path, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for d in dets {
        w.serialize(DumpRow {
            image_id: d.image_id,
            class_id: d.det.class_id,
            score: d.det.score,
            x1: d.det.bbox.x1,
            y1: d.det.bbox.y1,
            x2: d.det.bbox.x2,
            y2: d.det.bbox.y2,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detection_dump(path: &std::path::Path) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(DUMP_HEADER) {
        return Err(Error::format(path, format!("expected header {}", DUMP_HEADER.join(","))));
    }
    r.deserialize()
        .map(|row| {
            let row: DumpRow = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok(Detection {
                image_id: row.image_id,
                det: ScoredBox {
                    bbox: BBox::new(row.x1, row.y1, row.x2, row.y2),
                    score: row.score,
                    class_id: row.class_id,
                },
            })
        })
        .collect()
}
