//! COCO-style average precision over IoU thresholds 0.50..0.95, per-stage and
//! ensemble inference, AP gap reports and confidence histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph};
use crate::error::{Error, Result};
use crate::geometry::{iou, match_to_gt, nms, BBox, Detection, LabeledBox, ScoredBox};
use crate::model::{classify, forward_image, sample_proposals, CascadeModel, ProposalConfig};
use crate::synth::{splitmix64, SceneRecord};
use crate::tensor::Tensor;

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageResult {
    pub image_id: u64,
    pub dets: Vec<ScoredBox>,
    pub gts: Vec<LabeledBox>,
}

/// 101-point interpolated AP from a score-ranked list of true/false positive
/// flags and the number of ground-truth boxes.
pub fn interpolated_ap(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < recall.len() && recall[j] < level {
            j += 1;
        }
        if j < recall.len() {
            total += precision[j];
        }
    }
    total / 101.0
}

/// Matches every image once at `iou_threshold`; returns `(score, tp, class)`
/// triples in dataset rank order (score descending, ties by image then
/// detection order).
fn ranked_matches(images: &[ImageResult], iou_threshold: f64) -> Vec<(f64, bool, usize)> {
    let mut all: Vec<(f64, bool, usize, usize, usize)> = Vec::new();
    for (ii, img) in images.iter().enumerate() {
        for (di, (d, m)) in img.dets.iter().zip(match_to_gt(&img.dets, &img.gts, iou_threshold)).enumerate() {
            all.push((d.score, m.true_positive, d.class_id, ii, di));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.3.cmp(&b.3)).then(a.4.cmp(&b.4)));
    all.into_iter().map(|(s, tp, c, _, _)| (s, tp, c)).collect()
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("IoU threshold {t} must lie in (0, 1)")))
    }
}

/// AP of one class at one IoU threshold; `None` when the class has no ground
/// truth anywhere.
pub fn average_precision(images: &[ImageResult], class_id: usize, iou_threshold: f64) -> Result<Option<f64>> {
    check_threshold(iou_threshold)?;
    let num_gt = images
        .iter()
        .flat_map(|i| &i.gts)
        .filter(|g| g.class_id == class_id)
        .count();
    if num_gt == 0 {
        return Ok(None);
    }
    let ranked: Vec<bool> = ranked_matches(images, iou_threshold)
        .into_iter()
        .filter(|&(_, _, c)| c == class_id)
        .map(|(_, tp, _)| tp)
        .collect();
    Ok(Some(interpolated_ap(&ranked, num_gt)))
}

/// What an [`APReport`] was computed from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub variant: Option<String>,
    pub mode: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub thresholds: Vec<f64>,
    /// Class-averaged AP at each threshold.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
    /// Per-class AP at each threshold, for classes with ground truth.
    pub per_class: BTreeMap<usize, Vec<f64>>,
    /// Classes that only appear among detections; excluded from the means.
    pub undefined_classes: Vec<usize>,
    pub meta: ReportMeta,
}

impl APReport {
    /// Report over the standard grid from precomputed per-threshold values.
    pub fn from_values(ap: Vec<f64>, meta: ReportMeta) -> Result<Self> {
        let thresholds = iou_thresholds();
        if ap.len() != thresholds.len() {
            return Err(Error::InvalidArgument(format!("expected 10 AP values, got {}", ap.len())));
        }
        let mean_ap = ap.iter().sum::<f64>() / ap.len() as f64;
        Ok(Self {
            thresholds,
            ap,
            mean_ap,
            per_class: BTreeMap::new(),
            undefined_classes: Vec::new(),
            meta,
        })
    }

    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .map(|i| self.ap[i])
    }

    pub fn ap50(&self) -> f64 {
        self.ap[0]
    }

    pub fn ap75(&self) -> f64 {
        self.ap[5]
    }

    /// CSV table: one row per threshold, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iou_threshold", "ap"]).expect("in-memory write");
        for (t, a) in self.thresholds.iter().zip(&self.ap) {
            w.write_record([format!("{t:.2}"), a.to_string()]).expect("in-memory write");
        }
        w.write_record(["mean".to_string(), self.mean_ap.to_string()])
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

/// AP at each of the ten thresholds, averaged over classes that have ground
/// truth. Fails when there is no ground truth at all.
pub fn ap_sweep(images: &[ImageResult], meta: ReportMeta) -> Result<APReport> {
    let gt_classes: BTreeSet<usize> = images.iter().flat_map(|i| &i.gts).map(|g| g.class_id).collect();
    if gt_classes.is_empty() {
        return Err(Error::InvalidArgument("AP is undefined without ground-truth boxes".into()));
    }
    let det_classes: BTreeSet<usize> = images.iter().flat_map(|i| &i.dets).map(|d| d.class_id).collect();
    let thresholds = iou_thresholds();
    let mut per_class: BTreeMap<usize, Vec<f64>> = gt_classes.iter().map(|&c| (c, Vec::new())).collect();
    for &t in &thresholds {
        let ranked = ranked_matches(images, t);
        for (&c, values) in per_class.iter_mut() {
            let num_gt = images.iter().flat_map(|i| &i.gts).filter(|g| g.class_id == c).count();
            let flags: Vec<bool> = ranked.iter().filter(|r| r.2 == c).map(|r| r.1).collect();
            values.push(interpolated_ap(&flags, num_gt));
        }
    }
    let ap: Vec<f64> = (0..thresholds.len())
        .map(|i| per_class.values().map(|v| v[i]).sum::<f64>() / per_class.len() as f64)
        .collect();
    let mut report = APReport::from_values(ap, meta)?;
    report.per_class = per_class;
    report.undefined_classes = det_classes.difference(&gt_classes).copied().collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub label_a: String,
    pub label_b: String,
    pub thresholds: Vec<f64>,
    /// `a - b` at each threshold.
    pub delta: Vec<f64>,
    pub mean_delta: f64,
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iou_threshold", &format!("delta({} - {})", self.label_a, self.label_b)])
            .expect("in-memory write");
        for (t, d) in self.thresholds.iter().zip(&self.delta) {
            w.write_record([format!("{t:.2}"), d.to_string()]).expect("in-memory write");
        }
        w.write_record(["mean".to_string(), self.mean_delta.to_string()])
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

pub fn gap_report(a: &APReport, b: &APReport, label_a: &str, label_b: &str) -> Result<GapReport> {
    if a.thresholds != b.thresholds {
        return Err(Error::InvalidArgument(format!(
            "threshold grids differ: {:?} vs {:?}",
            a.thresholds, b.thresholds
        )));
    }
    Ok(GapReport {
        label_a: label_a.into(),
        label_b: label_b.into(),
        thresholds: a.thresholds.clone(),
        delta: a.ap.iter().zip(&b.ap).map(|(x, y)| x - y).collect(),
        mean_delta: a.mean_ap - b.mean_ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    /// `bins + 1` edges spanning `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub iou_range: (f64, f64),
}

impl ConfidenceHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_low", "bin_high", "count"]).expect("in-memory write");
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([format!("{:.4}", self.edges[i]), format!("{:.4}", self.edges[i + 1]), c.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

/// Scores of detections whose best IoU with a same-class ground truth lies in
/// `[iou_low, iou_high)`, binned uniformly over `[0, 1]`.
pub fn confidence_histogram(images: &[ImageResult], iou_low: f64, iou_high: f64, bins: usize) -> Result<ConfidenceHistogram> {
    if !(0.0 <= iou_low && iou_low < iou_high && iou_high <= 1.0) || bins == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= iou_low < iou_high <= 1 and bins > 0, got [{iou_low}, {iou_high}) with {bins} bins"
        )));
    }
    let mut counts = vec![0usize; bins];
    for img in images {
        for d in &img.dets {
            let best = img
                .gts
                .iter()
                .filter(|g| g.class_id == d.class_id)
                .map(|g| iou(&d.bbox, &g.bbox))
                .fold(0.0, f64::max);
            if best >= iou_low && best < iou_high {
                let b = ((d.score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
            }
        }
    }
    Ok(ConfidenceHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
        iou_range: (iou_low, iou_high),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    /// Score and boxes of one stage (1-based).
    Stage(usize),
    /// Final-stage boxes scored by the mean of every stage's class
    /// probabilities on the final stage's pooled features.
    Ensemble,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceMode::Stage(k) => write!(f, "stage{k}"),
            InferenceMode::Ensemble => f.write_str("ensemble"),
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ensemble" {
            return Ok(InferenceMode::Ensemble);
        }
        s.strip_prefix("stage")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(InferenceMode::Stage)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (expected stage<K> or ensemble)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
    pub proposals: ProposalConfig,
    /// Seeds evaluation proposals; independent of the training seed.
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_detections: 100,
            proposals: ProposalConfig::default(),
            seed: 0,
        }
    }
}

/// Boxes and `[N, K + 1]` class probabilities for `proposals` under `mode`.
pub fn class_probabilities(
    model: &CascadeModel,
    image: &Tensor,
    proposals: &[BBox],
    mode: InferenceMode,
) -> Result<(Vec<BBox>, Tensor)> {
    let n = model.num_stages();
    let mut g = Graph::new();
    let out = forward_image(&mut g, model, image, proposals)?;
    match mode {
        InferenceMode::Stage(k) if (1..=n).contains(&k) => {
            let s = &out.stages[k - 1];
            Ok((s.refined_boxes.clone(), softmax_rows(g.value(s.class_logits))))
        }
        InferenceMode::Stage(k) => Err(Error::InvalidArgument(format!("mode stage{k} on a {n}-stage model"))),
        InferenceMode::Ensemble => {
            let last = &out.stages[n - 1];
            let mut mean = Tensor::zeros(g.shape(last.class_logits));
            for s in 0..n {
                let logits = if s + 1 == n {
                    last.class_logits
                } else {
                    classify(&mut g, model, last.pooled, s)?
                };
                let p = softmax_rows(g.value(logits));
                for (m, v) in mean.data_mut().iter_mut().zip(p.data()) {
                    *m += v;
                }
            }
            let probs = mean.map(|v| v / n as f64);
            Ok((last.refined_boxes.clone(), probs))
        }
    }
}

/// Per-class detections from boxes and probabilities: background dropped,
/// score threshold, per-class NMS, highest scores first.
pub fn postprocess(boxes: &[BBox], probs: &Tensor, cfg: &InferConfig) -> Vec<ScoredBox> {
    let k = probs.shape()[1];
    let mut cands = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let row = probs.row(i);
        for (c, &score) in row.iter().enumerate().take(k).skip(1) {
            if score >= cfg.score_thresh && b.has_positive_size() {
                cands.push(ScoredBox {
                    bbox: *b,
                    score,
                    class_id: c,
                });
            }
        }
    }
    let mut kept = nms(&cands, cfg.nms_thresh);
    kept.truncate(cfg.max_detections);
    kept
}

/// Proposal seed for evaluating one scene.
pub fn eval_proposal_seed(seed: u64, scene_id: u64) -> u64 {
    splitmix64(splitmix64(seed ^ 0xe7a1) ^ scene_id)
}

pub fn infer(model: &CascadeModel, scene: &SceneRecord, mode: InferenceMode, cfg: &InferConfig) -> Result<Vec<ScoredBox>> {
    let proposals = sample_proposals(
        &scene.gts,
        model.image_size(),
        &cfg.proposals,
        eval_proposal_seed(cfg.seed, scene.id),
    );
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let (boxes, probs) = class_probabilities(model, &scene.batched_image(), &proposals, mode)?;
    Ok(postprocess(&boxes, &probs, cfg))
}

/// Runs inference on every scene and sweeps AP over the result.
pub fn evaluate(
    model: &CascadeModel,
    scenes: &[&SceneRecord],
    mode: InferenceMode,
    cfg: &InferConfig,
    meta: ReportMeta,
) -> Result<(APReport, Vec<ImageResult>)> {
    let results = scenes
        .iter()
        .map(|s| {
            Ok(ImageResult {
                image_id: s.id,
                dets: infer(model, s, mode, cfg)?,
                gts: s.gts.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ap_sweep(&results, meta)?, results))
}

/// Flattens per-image results into dump records.
pub fn to_detections(results: &[ImageResult]) -> Vec<Detection> {
    results
        .iter()
        .flat_map(|r| r.dets.iter().map(|&det| Detection { image_id: r.image_id, det }))
        .collect()
}

/// Regroups dumped detections by image against the given scenes' ground truth.
pub fn group_detections(dets: &[Detection], scenes: &[&SceneRecord]) -> Vec<ImageResult> {
    scenes
        .iter()
        .map(|s| ImageResult {
            image_id: s.id,
            dets: dets.iter().filter(|d| d.image_id == s.id).map(|d| d.det).collect(),
            gts: s.gts.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x1: f64, class_id: usize) -> LabeledBox {
        LabeledBox {
            bbox: BBox::new(x1, 0.0, x1 + 10.0, 10.0),
            class_id,
        }
    }

    fn det(x1: f64, score: f64, class_id: usize) -> ScoredBox {
        ScoredBox {
            bbox: BBox::new(x1, 0.0, x1 + 10.0, 10.0),
            score,
            class_id,
        }
    }

    #[test]
    fn perfect_and_null_detectors() {
        let img = ImageResult {
            image_id: 0,
            dets: vec![det(0.0, 1.0, 1), det(20.0, 1.0, 2)],
            gts: vec![gt(0.0, 1), gt(20.0, 2)],
        };
        let r = ap_sweep(std::slice::from_ref(&img), ReportMeta::default()).unwrap();
        assert!(r.ap.iter().all(|&a| a == 1.0));
        let empty = ImageResult { dets: vec![], ..img };
        let r = ap_sweep(&[empty], ReportMeta::default()).unwrap();
        assert!(r.ap.iter().all(|&a| a == 0.0));
        assert!(ap_sweep(&[ImageResult::default()], ReportMeta::default()).is_err());
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        // Shift of 7.0 on a width-10 box: IoU 3/17 < 0.5.
        let img = ImageResult {
            image_id: 0,
            dets: vec![det(7.0, 0.9, 1), det(1.0, 0.8, 1)],
            gts: vec![gt(0.0, 1)],
        };
        let ap = average_precision(&[img], 1, 0.5).unwrap().unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classes_without_ground_truth_are_flagged() {
        let img = ImageResult {
            image_id: 0,
            dets: vec![det(0.0, 0.9, 1), det(40.0, 0.9, 3)],
            gts: vec![gt(0.0, 1)],
        };
        let r = ap_sweep(&[img.clone()], ReportMeta::default()).unwrap();
        assert_eq!(r.undefined_classes, vec![3]);
        assert_eq!(r.ap50(), 1.0);
        assert_eq!(average_precision(&[img], 3, 0.5).unwrap(), None);
    }

    #[test]
    fn histogram_placement_and_filter() {
        // Width-10 boxes shifted by 2.5: IoU 7.5/12.5 = 0.6.
        let img = ImageResult {
            image_id: 0,
            dets: vec![det(2.5, 0.52, 1), det(1.0, 0.9, 1)],
            gts: vec![gt(0.0, 1)],
        };
        let h = confidence_histogram(&[img], 0.5, 0.75, 20).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[10], 1);
        assert!(confidence_histogram(&[], 0.8, 0.5, 20).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("stage2".parse::<InferenceMode>().unwrap(), InferenceMode::Stage(2));
        assert_eq!("ensemble".parse::<InferenceMode>().unwrap(), InferenceMode::Ensemble);
        assert!("stage0".parse::<InferenceMode>().is_err());
        assert_eq!(InferenceMode::Stage(3).to_string(), "stage3");
    }

    #[test]
    fn gap_requires_matching_grids() {
        let a = APReport::from_values(vec![0.5; 10], ReportMeta::default()).unwrap();
        let mut b = a.clone();
        b.thresholds[0] = 0.45;
        assert!(gap_report(&a, &b, "a", "b").is_err());
        assert!(gap_report(&a, &a, "a", "a").unwrap().delta.iter().all(|&d| d == 0.0));
    }
}
