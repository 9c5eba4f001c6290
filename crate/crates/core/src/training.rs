//! Single-image SGD training of a cascade: per-stage target assignment, RoI
//! subsampling, weighted classification + smooth-L1 losses, and a stepped
//! learning-rate schedule with warmup.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{assign_targets, forward_image, sample_proposals, Assignment, CascadeModel, ProposalConfig, StageOutput};
use crate::param::sgd_step;
use crate::synth::{splitmix64, SceneRecord};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs run at `base_lr * warmup_factor` before the base rate applies.
    pub warmup_epochs: f64,
    pub warmup_factor: f64,
    /// Epoch boundaries after which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<f64>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    /// One weight per stage, applied to both of that stage's losses.
    pub stage_loss_weights: Vec<f64>,
    pub smooth_l1_beta: f64,
    /// Rescales the full gradient to at most this global L2 norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub proposals: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.01,
            warmup_epochs: 1.0,
            warmup_factor: 0.1,
            decay_epochs: vec![10.0, 16.0],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            rois_per_image: 64,
            fg_fraction: 0.25,
            stage_loss_weights: vec![1.0, 0.5, 0.25],
            smooth_l1_beta: 1.0,
            max_grad_norm: Some(10.0),
            seed: 0,
            proposals: ProposalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if self.stage_loss_weights.len() < num_stages {
            return Err(Error::Config(format!(
                "{} stage loss weights for {num_stages} stages",
                self.stage_loss_weights.len()
            )));
        }
        if self.rois_per_image == 0 {
            return Err(Error::Config("rois_per_image must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::Config(format!("fg_fraction {} must lie in [0, 1]", self.fg_fraction)));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need base_lr >= 0 and momentum in [0, 1)".into()));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("max_grad_norm must be > 0".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate at fractional epoch `epoch` (0 = start of training).
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * self.warmup_factor;
        }
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }
}

/// Picks up to `fg_fraction * rois` foreground RoIs and fills the rest with
/// background; whichever side runs short is topped up from the other.
/// Returns indices into `assignments`, foreground first.
pub fn subsample_rois(assignments: &[Assignment], rois: usize, fg_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (mut fg, mut bg): (Vec<usize>, Vec<usize>) =
        (0..assignments.len()).partition(|&i| assignments[i].is_foreground());
    fg.shuffle(rng);
    bg.shuffle(rng);
    let fg_quota = ((fg_fraction * rois as f64).round() as usize).min(rois);
    let mut n_fg = fg.len().min(fg_quota);
    let n_bg = bg.len().min(rois - n_fg);
    n_fg = fg.len().min(rois - n_bg);
    fg.truncate(n_fg);
    fg.extend_from_slice(&bg[..n_bg]);
    fg
}

/// Losses of one stage on the sampled RoIs: mean cross-entropy over all of
/// them and smooth-L1 averaged over foreground RoIs only (zero without any).
pub fn stage_loss(
    g: &mut Graph,
    stage: &StageOutput,
    assignments: &[Assignment],
    sampled: &[usize],
    beta: f64,
) -> Result<(Var, Var)> {
    let logits = g.select_rows(stage.class_logits, sampled)?;
    let labels: Vec<usize> = sampled.iter().map(|&i| assignments[i].label).collect();
    let cls = g.softmax_cross_entropy(logits, &labels)?;
    let fg: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&i| assignments[i].target.is_some())
        .collect();
    let box_loss = if fg.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let pred = g.select_rows(stage.deltas, &fg)?;
        let rows: Vec<Vec<f64>> = fg
            .iter()
            .map(|&i| assignments[i].target.expect("filtered").to_vec())
            .collect();
        g.smooth_l1(pred, &Tensor::from_rows(&rows), beta)?
    };
    Ok((cls, box_loss))
}

/// Per-stage losses of a single step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: Vec<f64>,
    pub box_reg: Vec<f64>,
    pub total: f64,
    /// Global gradient L2 norm before any clipping.
    pub grad_norm: f64,
}

/// Proposal seed for one image in one epoch.
pub fn proposal_seed(train_seed: u64, epoch: usize, scene_id: u64) -> u64 {
    splitmix64(splitmix64(train_seed ^ 0x5eed) ^ splitmix64(epoch as u64) ^ scene_id)
}

/// Forward + backward + one SGD update on one image with given proposals.
pub fn train_step(
    model: &mut CascadeModel,
    scene: &SceneRecord,
    proposals: &[BBox],
    cfg: &TrainConfig,
    lr: f64,
    sample_seed: u64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let out = forward_image(&mut g, model, &scene.batched_image(), proposals)?;
    let mut terms = Vec::with_capacity(2 * out.stages.len());
    let mut losses = StepLosses {
        cls: Vec::new(),
        box_reg: Vec::new(),
        total: 0.0,
        grad_norm: 0.0,
    };
    for (i, stage) in out.stages.iter().enumerate() {
        let head = &model.stages[i];
        let assignments = assign_targets(&stage.input_boxes, &scene.gts, head.fg_iou_threshold, head.delta_stds);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(sample_seed ^ (i as u64 + 1)));
        let sampled = subsample_rois(&assignments, cfg.rois_per_image, cfg.fg_fraction, &mut rng);
        let (cls, box_loss) = stage_loss(&mut g, stage, &assignments, &sampled, cfg.smooth_l1_beta)?;
        let w = cfg.stage_loss_weights[i];
        losses.cls.push(g.value(cls).item());
        losses.box_reg.push(g.value(box_loss).item());
        terms.push((cls, w));
        terms.push((box_loss, w));
    }
    let total = g.linear_combination(&terms)?;
    losses.total = g.value(total).item();
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            epoch: 0,
            image: scene.id,
            detail: format!("cls {:?}, box {:?}", losses.cls, losses.box_reg),
        });
    }
    let mut grads = g.backward(total)?.to_param_map(&model.store);
    losses.grad_norm = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if let Some(max) = cfg.max_grad_norm {
        if losses.grad_norm > max {
            let scale = max / losses.grad_norm;
            grads.values_mut().flatten().for_each(|v| *v *= scale);
        }
    }
    sgd_step(model.store.iter_mut(), &grads, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(losses)
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub cls_loss: Vec<f64>,
    pub box_loss: Vec<f64>,
    pub total_loss: f64,
    pub max_grad_norm: f64,
    pub wall_seconds: f64,
}

/// Trains `model` in place on `scenes` (one image per step). Images are
/// visited in a seeded shuffled order each epoch; `on_epoch` sees each record
/// as it completes.
pub fn train(
    model: &mut CascadeModel,
    scenes: &[&SceneRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate(model.num_stages())?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one scene".into()));
    }
    let (w, h) = model.image_size();
    if let Some(s) = scenes.iter().find(|s| s.width() as f64 != w || s.height() as f64 != h) {
        return Err(Error::Config(format!(
            "scene {} is {}x{}, model expects {w}x{h}",
            s.id,
            s.width(),
            s.height()
        )));
    }
    let n = scenes.len();
    let stages = model.num_stages();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iteration: u64 = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ ((epoch as u64) << 32))));
        let mut rec = EpochRecord {
            epoch,
            lr: cfg.lr_at(epoch as f64),
            iterations: n,
            cls_loss: vec![0.0; stages],
            box_loss: vec![0.0; stages],
            total_loss: 0.0,
            max_grad_norm: 0.0,
            wall_seconds: 0.0,
        };
        for (k, &idx) in order.iter().enumerate() {
            let scene = scenes[idx];
            let lr = cfg.lr_at(epoch as f64 + k as f64 / n as f64);
            let proposals = sample_proposals(
                &scene.gts,
                model.image_size(),
                &cfg.proposals,
                proposal_seed(cfg.seed, epoch, scene.id),
            );
            let losses = train_step(model, scene, &proposals, cfg, lr, splitmix64(cfg.seed ^ iteration))
                .map_err(|e| match e {
                    Error::NonFiniteLoss { image, detail, .. } => Error::NonFiniteLoss {
                        iteration,
                        epoch,
                        image,
                        detail,
                    },
                    other => other,
                })?;
            for s in 0..stages {
                rec.cls_loss[s] += losses.cls[s] / n as f64;
                rec.box_loss[s] += losses.box_reg[s] / n as f64;
            }
            rec.total_loss += losses.total / n as f64;
            rec.max_grad_norm = rec.max_grad_norm.max(losses.grad_norm);
            iteration += 1;
        }
        rec.wall_seconds = started.elapsed().as_secs_f64();
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Repeated steps on one scene with fixed proposals at a constant rate; stops
/// as soon as `done` accepts the latest losses. Returns every step's losses.
pub fn overfit_scene(
    model: &mut CascadeModel,
    scene: &SceneRecord,
    cfg: &TrainConfig,
    max_iterations: usize,
    mut done: impl FnMut(&StepLosses) -> bool,
) -> Result<Vec<StepLosses>> {
    cfg.validate(model.num_stages())?;
    let proposals = sample_proposals(&scene.gts, model.image_size(), &cfg.proposals, proposal_seed(cfg.seed, 0, scene.id));
    let mut history = Vec::new();
    for it in 0..max_iterations {
        let l = train_step(model, scene, &proposals, cfg, cfg.base_lr, splitmix64(cfg.seed ^ it as u64))?;
        let stop = done(&l);
        history.push(l);
        if stop {
            break;
        }
    }
    Ok(history)
}
