//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test except to build inputs.
#![allow(dead_code)]

use fscascade::autograd::{Graph, Var};
use fscascade::eval::ImageResult;
use fscascade::model::{assign_targets, backbone_forward, cfs_forward, lfs_forward, CascadeModel, ModelConfig, StageOutput, Variant};
use fscascade::training::{stage_loss, subsample_rois};
use fscascade::{BBox, LabeledBox, ParamStore, ScoredBox, Tensor};
use fscascade::model::forward_image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks never sit within the
/// finite-difference step.
pub fn random_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any node to a scalar with fixed random weights, so that every
/// output element contributes a distinct gradient signal.
pub fn random_projection(g: &mut Graph, x: Var, seed: u64) -> Var {
    let flat = g.flatten(x).unwrap();
    let n = g.shape(flat)[1];
    let rows = g.shape(flat)[0];
    let mut r = rng(seed ^ 0xabcd);
    let w = g.constant(random_tensor(&[n, 1], &mut r));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.fully_connected(flat, w, b).unwrap();
    assert_eq!(g.shape(y), &[rows, 1]);
    g.sum_all(y)
}

/// Error between an analytic and a numeric derivative: relative where either
/// is non-negligible, absolute otherwise.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Worst error of analytic input gradients of `f` against central differences
/// with step `eps`. `f` builds a scalar from leaves created for `inputs`.
pub fn check_input_gradients(inputs: &[Tensor], eps: f64, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            worst = worst.max(grad_error(analytic[i], numeric));
        }
    }
    worst
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let area = |x: &BBox| ((x.x2 - x.x1).max(0.0)) * ((x.y2 - x.y1).max(0.0));
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Quadratic NMS: repeatedly take the best remaining box (highest score, then
/// lowest index) and strike every remaining same-class box overlapping it.
pub fn brute_force_nms(dets: &[ScoredBox], threshold: f64) -> Vec<ScoredBox> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        out.push(dets[best]);
        alive.retain(|&i| {
            i != best && !(dets[i].class_id == dets[best].class_id && oracle_iou(&dets[i].bbox, &dets[best].bbox) > threshold)
        });
    }
    out
}

/// Greedy matching oracle: visit detections by score (ties: input order); each
/// takes the highest-IoU unmatched same-class ground truth at or above the
/// threshold. Returns true-positive flags in input order.
pub fn oracle_match(dets: &[ScoredBox], gts: &[LabeledBox], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for d in order {
        let mut best: Option<usize> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class_id != dets[d].class_id {
                continue;
            }
            let v = oracle_iou(&dets[d].bbox, &g.bbox);
            if v >= threshold && best.map_or(true, |b| v > oracle_iou(&dets[d].bbox, &gts[b].bbox)) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp[d] = true;
        }
    }
    tp
}

/// AP by exhaustive evaluation of every ranked prefix: interpolated precision
/// at recall level r is the best precision over all prefixes reaching recall
/// r, averaged over r = 0.00, 0.01, ..., 1.00. `images` holds (dets, gts).
pub fn exhaustive_ap(images: &[(Vec<ScoredBox>, Vec<LabeledBox>)], class_id: usize, threshold: f64) -> Option<f64> {
    let num_gt: usize = images
        .iter()
        .map(|(_, g)| g.iter().filter(|b| b.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in images {
        let tp = oracle_match(dets, gts, threshold);
        for (d, hit) in dets.iter().zip(tp) {
            if d.class_id == class_id {
                ranked.push((d.score, hit));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let hits = ranked[..k].iter().filter(|r| r.1).count();
        points.push((hits as f64 / num_gt as f64, hits as f64 / k as f64));
    }
    let total: f64 = (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.gen_range(0.0..extent * 0.8);
    let y1 = rng.gen_range(0.0..extent * 0.8);
    let w = rng.gen_range(2.0..extent * 0.4);
    let h = rng.gen_range(2.0..extent * 0.4);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// A box near `base` (moderate random shift and rescale).
pub fn near_box(rng: &mut ChaCha8Rng, base: &BBox) -> BBox {
    let w = base.x2 - base.x1;
    let h = base.y2 - base.y1;
    let dx = rng.gen_range(-0.3..0.3) * w;
    let dy = rng.gen_range(-0.3..0.3) * h;
    let sw = rng.gen_range(0.7..1.3);
    let sh = rng.gen_range(0.7..1.3);
    BBox::new(base.x1 + dx, base.y1 + dy, base.x1 + dx + w * sw, base.y1 + dy + h * sh)
}

/// Direct-loop cross-correlation of `x [C_in, H, W]` with `k [C_out, C_in, kh,
/// kw]`, stride 1 and zero padding `pad`, plus bias.
pub fn naive_conv(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], b: &[f64], ksize: usize, pad: usize) -> Vec<f64> {
    let c_out = b.len();
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..ksize {
                        for kx in 0..ksize {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((o * c_in + c) * ksize + ky) * ksize + kx] * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

pub fn relu_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

pub fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn random_dets(r: &mut ChaCha8Rng, n: usize, classes: usize, coarse_scores: bool) -> Vec<ScoredBox> {
    // Clustered boxes so suppression actually happens.
    let anchors: Vec<BBox> = (0..3).map(|_| random_box(r, 64.0)).collect();
    (0..n)
        .map(|_| {
            let a = anchors[r.gen_range(0..anchors.len())];
            let score = if coarse_scores {
                r.gen_range(0..5) as f64 / 4.0
            } else {
                r.gen::<f64>()
            };
            ScoredBox {
                bbox: near_box(r, &a),
                score,
                class_id: r.gen_range(1..=classes),
            }
        })
        .collect()
}

/// A small random detection problem: up to 10 GTs and 20 detections spread
/// over up to three images, with continuous (tie-free) scores.
pub fn random_case(r: &mut ChaCha8Rng) -> Vec<ImageResult> {
    let images = r.gen_range(1..=3);
    let mut gt_budget = r.gen_range(1..=10);
    let mut det_budget = r.gen_range(0..=20);
    (0..images)
        .map(|i| {
            let last = i + 1 == images;
            let ng = if last { gt_budget } else { r.gen_range(0..=gt_budget) };
            gt_budget -= ng;
            let nd = if last { det_budget } else { r.gen_range(0..=det_budget) };
            det_budget -= nd;
            let gts: Vec<LabeledBox> = (0..ng)
                .map(|_| LabeledBox {
                    bbox: random_box(r, 64.0),
                    class_id: r.gen_range(1..=2),
                })
                .collect();
            let dets = (0..nd)
                .map(|_| {
                    let bbox = if !gts.is_empty() && r.gen_bool(0.75) {
                        let k = r.gen_range(0..gts.len());
                        near_box(r, &gts[k].bbox)
                    } else {
                        random_box(r, 64.0)
                    };
                    ScoredBox {
                        bbox,
                        score: r.gen::<f64>(),
                        class_id: r.gen_range(1..=2),
                    }
                })
                .collect();
            ImageResult {
                image_id: i as u64,
                dets,
                gts,
            }
        })
        .collect()
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::desk(variant, 3);
    cfg.backbone.height = 16;
    cfg.backbone.width = 16;
    cfg.backbone.num_blocks = 2;
    cfg.backbone.channels = 8;
    cfg.hidden_width = 6;
    cfg.pooled_size = 2;
    cfg.num_classes = 2;
    cfg
}

/// Training loss of a tiny model with each stage's input boxes pinned, so the
/// loss is a smooth function of the parameters alone (box coordinates carry no
/// gradient between stages).
pub fn pinned_loss(g: &mut Graph, model: &CascadeModel, image: &Tensor, stage_boxes: &[Vec<BBox>], gts: &[LabeledBox]) -> Var {
    let feature = backbone_forward(g, model, image).unwrap();
    let mut prev = None;
    let mut terms = Vec::new();
    for (i, head) in model.stages.iter().enumerate() {
        let boxes = &stage_boxes[i];
        let pooled = g.roi_pool(feature, boxes, model.config.pooled_size, model.spatial_scale()).unwrap();
        let cls = cfs_forward(g, &model.store, pooled, &model.stages[..=i], model.variant(), false).unwrap();
        let class_logits = head.cls_predictor.forward(g, &model.store, cls.combined, false).unwrap();
        let (deltas, box_feature) = if model.variant().conv_box_trunk() {
            let bf = lfs_forward(g, &model.store, pooled, prev, head, model.variant()).unwrap();
            let flat = g.flatten(bf).unwrap();
            (head.box_predictor.forward(g, &model.store, flat, false).unwrap(), Some(bf))
        } else {
            (head.box_predictor.forward(g, &model.store, cls.own, false).unwrap(), None)
        };
        prev = box_feature;
        let stage = StageOutput {
            input_boxes: boxes.clone(),
            pooled,
            class_logits,
            deltas,
            refined_boxes: Vec::new(),
            box_feature,
        };
        let a = assign_targets(boxes, gts, head.fg_iou_threshold, head.delta_stds);
        let mut r = ChaCha8Rng::seed_from_u64(i as u64);
        let idx = subsample_rois(&a, 8, 0.5, &mut r);
        let (c, b) = stage_loss(g, &stage, &a, &idx, 1.0).unwrap();
        terms.push((c, 1.0));
        terms.push((b, 1.0 / (i + 1) as f64));
    }
    g.linear_combination(&terms).unwrap()
}

pub fn pinned_value(cfg: &ModelConfig, store: &ParamStore, image: &Tensor, stage_boxes: &[Vec<BBox>], gts: &[LabeledBox]) -> f64 {
    let model = CascadeModel::from_store(cfg.clone(), store.clone()).unwrap();
    let mut g = Graph::new();
    let l = pinned_loss(&mut g, &model, image, stage_boxes, gts);
    g.value(l).item()
}

/// Operators covered by [`op_gradient_error`].
pub const GRADIENT_OPS: [&str; 9] = [
    "fully_connected",
    "conv2d_k3_s1",
    "conv2d_k1_s1",
    "conv2d_k3_s2",
    "relu",
    "elementwise_sum",
    "linear_combination",
    "softmax_cross_entropy",
    "smooth_l1",
];

/// Worst analytic-vs-central-difference error of one operator on random
/// inputs drawn from `seed`. `"roi_pool"` is also accepted.
pub fn op_gradient_error(op: &str, seed: u64, eps: f64) -> f64 {
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(op.len() as u64));
    let conv = |r: &mut ChaCha8Rng, k: usize, stride: usize, pad: usize| {
        let ins = [random_tensor(&[1, 2, 5, 5], r), random_tensor(&[2, 2, k, k], r), random_tensor(&[2], r)];
        check_input_gradients(&ins, eps, &|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            random_projection(g, y, seed)
        })
    };
    match op {
        "fully_connected" => {
            let ins = [random_tensor(&[3, 4], &mut r), random_tensor(&[4, 5], &mut r), random_tensor(&[5], &mut r)];
            check_input_gradients(&ins, eps, &|g, v| {
                let y = g.fully_connected(v[0], v[1], v[2]).unwrap();
                random_projection(g, y, seed)
            })
        }
        "conv2d_k3_s1" => conv(&mut r, 3, 1, 1),
        "conv2d_k1_s1" => conv(&mut r, 1, 1, 0),
        "conv2d_k3_s2" => conv(&mut r, 3, 2, 1),
        "relu" => {
            let ins = [random_tensor_off_kink(&[4, 8], &mut r)];
            check_input_gradients(&ins, eps, &|g, v| {
                let y = g.relu(v[0]);
                random_projection(g, y, seed)
            })
        }
        "elementwise_sum" => {
            let ins = [random_tensor(&[2, 6], &mut r), random_tensor(&[2, 6], &mut r), random_tensor(&[2, 6], &mut r)];
            check_input_gradients(&ins, eps, &|g, v| {
                let y = g.elementwise_sum(v).unwrap();
                random_projection(g, y, seed)
            })
        }
        "linear_combination" => {
            let ins = [random_tensor(&[2, 6], &mut r), random_tensor(&[2, 6], &mut r)];
            check_input_gradients(&ins, eps, &|g, v| {
                let a = g.sum_all(v[0]);
                let b = random_projection(g, v[1], seed);
                g.linear_combination(&[(a, 0.7), (b, -1.3)]).unwrap()
            })
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
            let ins = [random_tensor(&[5, 4], &mut r)];
            check_input_gradients(&ins, eps, &|g, v| {
                let rows = g.select_rows(v[0], &[4, 0, 2]).unwrap();
                g.softmax_cross_entropy(rows, &labels).unwrap()
            })
        }
        "smooth_l1" => {
            let pred = random_tensor(&[3, 4], &mut r);
            // Residuals in both branches, none near the switch point at |d| = 1.
            let offsets = [0.4, 1.9, -0.6, -2.2];
            let data = pred.data().iter().enumerate().map(|(i, p)| p - offsets[i % 4]).collect();
            let target = Tensor::new(pred.shape().to_vec(), data).unwrap();
            check_input_gradients(&[pred], eps, &|g, v| g.smooth_l1(v[0], &target, 1.0).unwrap())
        }
        "roi_pool" => {
            let boxes: Vec<BBox> = (0..2).map(|_| random_box(&mut r, 32.0)).collect();
            let ins = [random_tensor(&[1, 2, 4, 4], &mut r)];
            check_input_gradients(&ins, eps, &|g, v| {
                let y = g.roi_pool(v[0], &boxes, 3, 0.125).unwrap();
                random_projection(g, y, seed)
            })
        }
        other => panic!("no gradient check for {other}"),
    }
}

/// Finite-difference check of the full training loss of a tiny model of
/// variant `ALL[seed % 4]`, on `samples` random entries of every parameter.
/// Returns the variant and the worst error.
pub fn model_gradient_error(seed: u64, eps: f64, samples: usize) -> (Variant, f64) {
    let variant = Variant::ALL[seed as usize % 4];
    let cfg = tiny_config(variant);
    let mut model = CascadeModel::new(cfg.clone(), seed).unwrap();
    // Larger predictor weights so later stages see non-trivial boxes.
    for p in model.store.iter_mut() {
        if p.name.ends_with("pred.weight") {
            for v in p.tensor.data_mut() {
                *v *= 30.0;
            }
        }
    }
    let mut r = rng(700 + seed);
    let image = random_tensor(&[1, 3, 16, 16], &mut r).map(|v| v.abs());
    let gts = vec![
        LabeledBox { bbox: BBox::new(2.0, 3.0, 10.0, 12.0), class_id: 1 },
        LabeledBox { bbox: BBox::new(8.0, 6.0, 15.0, 15.0), class_id: 2 },
    ];
    let mut proposals = Vec::new();
    for gt in &gts {
        proposals.push(gt.bbox);
        for _ in 0..2 {
            proposals.push(near_box(&mut r, &gt.bbox).clip((16.0, 16.0)));
        }
    }
    proposals.push(random_box(&mut r, 16.0).clip((16.0, 16.0)));
    let stage_boxes: Vec<Vec<BBox>> = {
        let mut g = Graph::new();
        let out = forward_image(&mut g, &model, &image, &proposals).unwrap();
        out.stages.iter().map(|st| st.input_boxes.clone()).collect()
    };
    assert_ne!(stage_boxes[0], stage_boxes[2], "later stages should see refined boxes");
    let mut g = Graph::new();
    let loss = pinned_loss(&mut g, &model, &image, &stage_boxes, &gts);
    let grads = g.backward(loss).unwrap().to_param_map(&model.store);
    let mut worst: f64 = 0.0;
    for name in model.store.names().map(str::to_owned).collect::<Vec<_>>() {
        let n = model.store.expect(&name).numel();
        for _ in 0..samples {
            let i = r.gen_range(0..n);
            let mut plus = model.store.clone();
            plus.get_mut(&name).unwrap().tensor.data_mut()[i] += eps;
            let mut minus = model.store.clone();
            minus.get_mut(&name).unwrap().tensor.data_mut()[i] -= eps;
            let numeric = (pinned_value(&cfg, &plus, &image, &stage_boxes, &gts)
                - pinned_value(&cfg, &minus, &image, &stage_boxes, &gts))
                / (2.0 * eps);
            worst = worst.max(grad_error(grads[&name][i], numeric));
        }
    }
    (variant, worst)
}

/// A store holding random values for every parameter `cfg` declares.
pub fn random_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for (_, spec) in fscascade::model::layout(cfg) {
        store
            .insert(fscascade::Parameter::new(spec.name.clone(), random_tensor(&spec.shape, &mut r)))
            .unwrap();
    }
    store
}

pub fn set_param(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let p = store.get_mut(name).unwrap();
    for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

pub fn param_values(store: &ParamStore, name: &str) -> Vec<f64> {
    store.expect(name).tensor.data().to_vec()
}

/// Worst per-stage deviation of the three-stage localization chain on
/// two-channel 7x7 inputs from a direct-loop evaluation of
/// `B_1 = ReLU(F_1^2(ReLU(F_1^1(X_1))))` and
/// `B_i = X_i + G_{i-1}(ReLU(F_i^1(B_{i-1})))`.
pub fn residual_chain_deviation(seed: u64) -> [f64; 3] {
    let (c, h, w) = (2, 7, 7);
    let mut cfg = ModelConfig::desk(Variant::Lfs, 3);
    cfg.backbone.channels = c;
    let store = random_store(&cfg, seed);
    let heads: Vec<_> = (1..=3).map(|i| fscascade::model::StageHead::new(i, &cfg)).collect();
    let mut r = rng(1000 + seed);
    let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&[1, c, h, w], &mut r)).collect();

    let mut g = Graph::new();
    let x: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
    let b1 = lfs_forward(&mut g, &store, x[0], None, &heads[0], Variant::Lfs).unwrap();
    let b2 = lfs_forward(&mut g, &store, x[1], Some(b1), &heads[1], Variant::FsCascade).unwrap();
    let b3 = lfs_forward(&mut g, &store, x[2], Some(b2), &heads[2], Variant::Lfs).unwrap();

    let conv = |input: &[f64], prefix: &str, k: usize| {
        naive_conv(
            input,
            c,
            h,
            w,
            &param_values(&store, &format!("{prefix}.weight")),
            &param_values(&store, &format!("{prefix}.bias")),
            k,
            k / 2,
        )
    };
    let o1 = relu_vec(&conv(&relu_vec(&conv(xs[0].data(), "stage1.box.conv1", 3)), "stage1.box.conv2", 3));
    let o2 = add_vec(xs[1].data(), &conv(&relu_vec(&conv(&o1, "stage2.box.conv1", 3)), "stage2.box.res", 1));
    let o3 = add_vec(xs[2].data(), &conv(&relu_vec(&conv(&o2, "stage3.box.conv1", 3)), "stage3.box.res", 1));
    let dev = |v: Var, want: &[f64]| {
        g.value(v)
            .data()
            .iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    [dev(b1, &o1), dev(b2, &o2), dev(b3, &o3)]
}
