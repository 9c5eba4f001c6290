//! Forward passes: backbone, classification sharing (parallel sum over stage
//! FC transforms), localization sharing (serial residual chain), and the full
//! cascade.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, BBox};
use crate::param::ParamStore;
use crate::tensor::Tensor;

use super::config::Variant;
use super::{BoxTrunk, CascadeModel, StageHead};

/// Runs the stride-2 conv/ReLU blocks on `image [1, 3, H, W]`.
pub fn backbone_forward(g: &mut Graph, model: &CascadeModel, image: &Tensor) -> Result<Var> {
    let b = &model.config.backbone;
    if image.shape() != [1, 3, b.height, b.width] {
        return Err(Error::dim(
            "backbone_forward",
            format!("image shape {:?}, config expects [1, 3, {}, {}]", image.shape(), b.height, b.width),
        ));
    }
    let mut x = g.constant(image.clone());
    for conv in &model.backbone {
        let y = conv.forward(g, &model.store, x)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// `ReLU(W2(ReLU(W1(x))))` for one stage.
fn cls_path(g: &mut Graph, store: &ParamStore, head: &StageHead, flat: Var, frozen: bool) -> Result<Var> {
    let h = head.cls_fc1.forward(g, store, flat, frozen)?;
    let h = g.relu(h);
    let h = head.cls_fc2.forward(g, store, h, frozen)?;
    Ok(g.relu(h))
}

/// Classification features for the last head in `heads`.
#[derive(Debug, Clone, Copy)]
pub struct ClsFeature {
    /// Input to the classifier: the element-wise sum over all heads' paths
    /// when classification is shared, else the last head's own path.
    pub combined: Var,
    /// The last head's own path.
    pub own: Var,
}

/// Classification features of stage `heads.len()` from its pooled RoI
/// features `pooled [N, C, P, P]`.
///
/// With sharing, the pooled features pass through every listed stage's two FC
/// transforms independently and the results are summed. When
/// `detach_preceding` is set, preceding stages' weights are used as constants.
pub fn cfs_forward(
    g: &mut Graph,
    store: &ParamStore,
    pooled: Var,
    heads: &[StageHead],
    variant: Variant,
    detach_preceding: bool,
) -> Result<ClsFeature> {
    let (last, preceding) = heads
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("cfs_forward needs at least one stage head".into()))?;
    let flat = g.flatten(pooled)?;
    let own = cls_path(g, store, last, flat, false)?;
    if !variant.shares_classification() || preceding.is_empty() {
        return Ok(ClsFeature { combined: own, own });
    }
    let mut paths = Vec::with_capacity(heads.len());
    for head in preceding {
        paths.push(cls_path(g, store, head, flat, detach_preceding)?);
    }
    paths.push(own);
    let combined = g.elementwise_sum(&paths)?;
    Ok(ClsFeature { combined, own })
}

/// Box feature of `head`'s stage from its pooled features and, for later
/// stages, the previous stage's box feature of the same proposal lineage.
///
/// First stage: `ReLU(conv2(ReLU(conv1(pooled))))`.
/// Later stages: `pooled + res(ReLU(conv1(prev)))`.
pub fn lfs_forward(
    g: &mut Graph,
    store: &ParamStore,
    pooled: Var,
    prev_box_feature: Option<Var>,
    head: &StageHead,
    variant: Variant,
) -> Result<Var> {
    if !variant.conv_box_trunk() {
        return Err(Error::InvalidArgument(format!(
            "variant {variant} regresses boxes from the FC trunk and has no box feature chain"
        )));
    }
    match (&head.box_trunk, prev_box_feature) {
        (BoxTrunk::ConvFirst { conv1, conv2 }, None) => {
            let h = conv1.forward(g, store, pooled)?;
            let h = g.relu(h);
            let h = conv2.forward(g, store, h)?;
            Ok(g.relu(h))
        }
        (BoxTrunk::ConvResidual { conv, residual }, Some(prev)) => {
            let h = conv.forward(g, store, prev)?;
            let h = g.relu(h);
            let r = residual.forward(g, store, h)?;
            g.elementwise_sum(&[pooled, r])
        }
        (BoxTrunk::ConvResidual { .. }, None) => Err(Error::InvalidArgument(format!(
            "stage {} needs the previous stage's box feature",
            head.index
        ))),
        (BoxTrunk::ConvFirst { .. }, Some(_)) => Err(Error::InvalidArgument(
            "the first stage takes no previous box feature".into(),
        )),
        (BoxTrunk::Fc, _) => Err(Error::InvalidArgument(format!(
            "stage {} has no conv box trunk",
            head.index
        ))),
    }
}

/// Everything one stage produced for a batch of RoIs.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// Boxes this stage pooled from (proposals for stage 1, else the previous
    /// stage's refined boxes). Index `k` descends from proposal `k`.
    pub input_boxes: Vec<BBox>,
    pub pooled: Var,
    pub class_logits: Var,
    pub deltas: Var,
    pub refined_boxes: Vec<BBox>,
    /// Conv box feature; `None` for variants regressing from the FC trunk.
    pub box_feature: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub feature: Var,
    pub stages: Vec<StageOutput>,
}

/// Stage `stage` (0-based) classifier logits for already pooled features.
pub fn classify(g: &mut Graph, model: &CascadeModel, pooled: Var, stage: usize) -> Result<Var> {
    let heads = &model.stages[..=stage];
    let feat = cfs_forward(g, &model.store, pooled, heads, model.variant(), model.config.detach_shared_cls)?;
    heads[stage].cls_predictor.forward(g, &model.store, feat.combined, false)
}

/// Runs every stage in order. Stage `i + 1` pools on stage `i`'s refined boxes;
/// those coordinates are plain values, so no gradient flows through them.
pub fn cascade_forward(g: &mut Graph, model: &CascadeModel, feature: Var, proposals: &[BBox]) -> Result<Vec<StageOutput>> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("cascade_forward needs at least one proposal".into()));
    }
    let store = &model.store;
    let variant = model.variant();
    let image_size = model.image_size();
    let mut boxes = proposals.to_vec();
    let mut prev_feature: Option<Var> = None;
    let mut outputs = Vec::with_capacity(model.num_stages());
    for (i, head) in model.stages.iter().enumerate() {
        let pooled = g.roi_pool(feature, &boxes, model.config.pooled_size, model.spatial_scale())?;
        let cls = cfs_forward(g, store, pooled, &model.stages[..=i], variant, model.config.detach_shared_cls)?;
        let class_logits = head.cls_predictor.forward(g, store, cls.combined, false)?;
        let (deltas, box_feature) = if variant.conv_box_trunk() {
            let bf = lfs_forward(g, store, pooled, prev_feature, head, variant)?;
            let flat = g.flatten(bf)?;
            (head.box_predictor.forward(g, store, flat, false)?, Some(bf))
        } else {
            (head.box_predictor.forward(g, store, cls.own, false)?, None)
        };
        let d = g.value(deltas);
        let refined_boxes: Vec<BBox> = boxes
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let r = d.row(k);
                decode_deltas(b, [r[0], r[1], r[2], r[3]], head.delta_stds, image_size)
            })
            .collect();
        outputs.push(StageOutput {
            input_boxes: std::mem::replace(&mut boxes, refined_boxes.clone()),
            pooled,
            class_logits,
            deltas,
            refined_boxes,
            box_feature,
        });
        prev_feature = box_feature;
    }
    Ok(outputs)
}

/// Backbone plus cascade on one image.
pub fn forward_image(g: &mut Graph, model: &CascadeModel, image: &Tensor, proposals: &[BBox]) -> Result<CascadeOutput> {
    let feature = backbone_forward(g, model, image)?;
    let stages = cascade_forward(g, model, feature, proposals)?;
    Ok(CascadeOutput { feature, stages })
}
