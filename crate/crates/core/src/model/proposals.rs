//! Controlled proposal sampler standing in for a region proposal network.
//!
//! Each ground-truth box yields `per_gt` jittered copies whose IoU with it is
//! stratified over `iou_range`: copy `j` targets an IoU drawn uniformly from
//! the `j`-th of `per_gt` equal sub-intervals. A copy is built by moving along
//! a random direction in (shift, log-scale) space and bisecting the step
//! length until the clipped box hits the target IoU. Uniform random boxes are
//! appended as background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, LabeledBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub per_gt: usize,
    pub iou_range: (f64, f64),
    pub num_background: usize,
    /// Multiplier on the jitter step; 0 returns exact copies of the ground truth.
    pub jitter: f64,
    /// Side lengths of background boxes as fractions of the image side.
    pub background_size: (f64, f64),
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            per_gt: 16,
            iou_range: (0.3, 0.95),
            num_background: 16,
            jitter: 1.0,
            background_size: (0.1, 0.5),
        }
    }
}

const DIRECTION_ATTEMPTS: usize = 24;
const IOU_TOLERANCE: f64 = 0.01;
const MIN_SIDE: f64 = 1.0;

fn jittered(gt: &BBox, dir: [f64; 4], step: f64, image: (f64, f64)) -> BBox {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    BBox::from_center(
        cx + step * dir[0] * w,
        cy + step * dir[1] * h,
        w * (step * dir[2]).exp(),
        h * (step * dir[3]).exp(),
    )
    .clip(image)
}

fn unit_direction(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let d: [f64; 4] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return d.map(|v| v / n);
        }
    }
}

/// Finds a box whose IoU with `gt` is close to `target`.
fn jitter_to_iou(gt: &BBox, target: f64, image: (f64, f64), rng: &mut ChaCha8Rng) -> BBox {
    let mut best: Option<(f64, BBox)> = None;
    for _ in 0..DIRECTION_ATTEMPTS {
        let dir = unit_direction(rng);
        let at = |s: f64| jittered(gt, dir, s, image);
        let mut hi = 0.25;
        while iou(&at(hi), gt) > target && hi < 64.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if iou(&at(mid), gt) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cand = at(0.5 * (lo + hi));
        if cand.width() < MIN_SIDE || cand.height() < MIN_SIDE {
            continue;
        }
        let err = (iou(&cand, gt) - target).abs();
        if err < IOU_TOLERANCE {
            return cand;
        }
        if best.map_or(true, |(e, _)| err < e) {
            best = Some((err, cand));
        }
    }
    best.map_or(*gt, |(_, b)| b)
}

fn jitter_with_scale(gt: &BBox, target: f64, scale: f64, image: (f64, f64), rng: &mut ChaCha8Rng) -> BBox {
    let b = jitter_to_iou(gt, target, image, rng);
    if scale == 1.0 {
        return b;
    }
    // Interpolate the corner offsets.
    let lerp = |g: f64, v: f64| g + scale * (v - g);
    BBox::new(lerp(gt.x1, b.x1), lerp(gt.y1, b.y1), lerp(gt.x2, b.x2), lerp(gt.y2, b.y2)).clip(image)
}

/// Proposals for one image; deterministic in `seed`. `image_size` is `(W, H)`.
pub fn sample_proposals(gts: &[LabeledBox], image_size: (f64, f64), cfg: &ProposalConfig, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(gts.len() * cfg.per_gt + cfg.num_background);
    let (lo, hi) = cfg.iou_range;
    let width = (hi - lo) / cfg.per_gt.max(1) as f64;
    for gt in gts {
        for j in 0..cfg.per_gt {
            let target = lo + width * (j as f64 + rng.gen::<f64>());
            if cfg.jitter == 0.0 {
                out.push(gt.bbox);
            } else {
                out.push(jitter_with_scale(&gt.bbox, target, cfg.jitter, image_size, &mut rng));
            }
        }
    }
    let (w, h) = image_size;
    let (smin, smax) = cfg.background_size;
    for _ in 0..cfg.num_background {
        let bw = w * rng.gen_range(smin..=smax);
        let bh = h * rng.gen_range(smin..=smax);
        let x1 = rng.gen_range(0.0..=(w - bw).max(0.0));
        let y1 = rng.gen_range(0.0..=(h - bh).max(0.0));
        out.push(BBox::new(x1, y1, x1 + bw, y1 + bh));
    }
    out
}
