use crate::geometry::{encode_deltas, iou, BBox, LabeledBox};

/// Training target for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    /// Class of the best-overlapping ground truth, or 0 (background).
    pub label: usize,
    /// Encoded deltas to the matched ground truth; foreground only.
    pub target: Option<[f64; 4]>,
    pub max_iou: f64,
    pub gt_index: Option<usize>,
}

impl Assignment {
    pub fn is_foreground(&self) -> bool {
        self.label > 0
    }
}

/// Labels each proposal by its best-IoU ground truth: foreground when that IoU
/// is at least `fg_iou_threshold`, background otherwise. Proposals without
/// positive area are background.
pub fn assign_targets(proposals: &[BBox], gts: &[LabeledBox], fg_iou_threshold: f64, stds: [f64; 4]) -> Vec<Assignment> {
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(i, g)| (i, iou(p, &g.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            let max_iou = best.map_or(0.0, |b| b.1);
            match best {
                Some((i, v)) if v >= fg_iou_threshold && p.has_positive_size() => {
                    let target = encode_deltas(p, &gts[i].bbox, stds).ok();
                    Assignment {
                        label: gts[i].class_id,
                        target,
                        max_iou,
                        gt_index: Some(i),
                    }
                }
                _ => Assignment {
                    label: 0,
                    target: None,
                    max_iou,
                    gt_index: None,
                },
            }
        })
        .collect()
}
