//! The cascade detector: backbone, RoI pooling, proposal sampling, target
//! assignment and the per-stage heads with switchable feature sharing.
//!
//! Parameter names follow `backbone.block{b}.*` and `stage{i}.{cls,box}.*`:
//!
//! | name                     | role                                             |
//! |--------------------------|--------------------------------------------------|
//! | `stage{i}.cls.fc1`       | first FC transform of stage `i`                  |
//! | `stage{i}.cls.fc2`       | second FC transform of stage `i`                 |
//! | `stage{i}.cls.pred`      | hidden -> K + 1 logits                           |
//! | `stage1.box.conv1/conv2` | the two 3x3 convs of the first box trunk         |
//! | `stage{i}.box.conv1`     | 3x3 conv on the previous stage's box feature     |
//! | `stage{i}.box.res`       | 1x1 conv whose output is added to pooled features|
//! | `stage{i}.box.pred`      | box feature -> 4 class-agnostic deltas           |

mod assign;
mod audit;
mod config;
mod heads;
mod layers;
mod proposals;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use assign::{assign_targets, Assignment};
pub use audit::{count_for_variant, count_parameters, lfs_extra_closed_form, Component, ParamCounts};
pub use config::{BackboneConfig, ModelConfig, Variant, DEFAULT_DELTA_STDS, DEFAULT_STAGE_THRESHOLDS};
pub use heads::{
    backbone_forward, cascade_forward, cfs_forward, classify, forward_image, lfs_forward, CascadeOutput,
    ClsFeature, StageOutput,
};
pub use layers::{Conv, Init, Linear, ParamSpec};
pub use proposals::{sample_proposals, ProposalConfig};

use crate::error::{Error, Result};
use crate::param::{ParamStore, Parameter};

/// Where a stage's box regression reads its features from.
#[derive(Debug, Clone, PartialEq)]
pub enum BoxTrunk {
    /// The stage's own FC trunk output.
    Fc,
    /// First stage of the conv trunk: two 3x3 convs on the pooled features.
    ConvFirst { conv1: Conv, conv2: Conv },
    /// Later stages: 3x3 conv on the previous box feature, then a 1x1 conv whose
    /// output is added to the stage's pooled features.
    ConvResidual { conv: Conv, residual: Conv },
}

/// Parameters and settings of one cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageHead {
    /// 1-based stage number.
    pub index: usize,
    pub fg_iou_threshold: f64,
    pub delta_stds: [f64; 4],
    pub cls_fc1: Linear,
    pub cls_fc2: Linear,
    pub cls_predictor: Linear,
    pub box_trunk: BoxTrunk,
    pub box_predictor: Linear,
}

impl StageHead {
    pub fn new(index: usize, cfg: &ModelConfig) -> Self {
        let c = cfg.backbone.channels;
        let flat = c * cfg.pooled_size * cfg.pooled_size;
        let hidden = cfg.hidden_width;
        let p = format!("stage{index}");
        let (box_trunk, box_in) = if cfg.variant.conv_box_trunk() {
            let trunk = if index == 1 {
                BoxTrunk::ConvFirst {
                    conv1: Conv::new(&format!("{p}.box.conv1"), c, c, 3, 1),
                    conv2: Conv::new(&format!("{p}.box.conv2"), c, c, 3, 1),
                }
            } else {
                BoxTrunk::ConvResidual {
                    conv: Conv::new(&format!("{p}.box.conv1"), c, c, 3, 1),
                    residual: Conv::new(&format!("{p}.box.res"), c, c, 1, 1),
                }
            };
            (trunk, flat)
        } else {
            (BoxTrunk::Fc, hidden)
        };
        Self {
            index,
            fg_iou_threshold: cfg.stage_iou_thresholds[index - 1],
            delta_stds: cfg.delta_stds[index - 1],
            cls_fc1: Linear::new(&format!("{p}.cls.fc1"), flat, hidden),
            cls_fc2: Linear::new(&format!("{p}.cls.fc2"), hidden, hidden),
            cls_predictor: Linear::new(&format!("{p}.cls.pred"), hidden, cfg.num_classes + 1),
            box_trunk,
            box_predictor: Linear::new(&format!("{p}.box.pred"), box_in, 4),
        }
    }

    pub fn specs(&self) -> Vec<(Component, ParamSpec)> {
        let mut out = Vec::new();
        let mut push = |c: Component, specs: [ParamSpec; 2]| out.extend(specs.into_iter().map(|s| (c, s)));
        push(Component::ClsTrunk, self.cls_fc1.specs(Init::He { fan_in: self.cls_fc1.d_in }));
        push(Component::ClsTrunk, self.cls_fc2.specs(Init::He { fan_in: self.cls_fc2.d_in }));
        match &self.box_trunk {
            BoxTrunk::Fc => {}
            BoxTrunk::ConvFirst { conv1, conv2 } => {
                push(Component::BoxTrunk, conv1.specs());
                push(Component::BoxTrunk, conv2.specs());
            }
            BoxTrunk::ConvResidual { conv, residual } => {
                push(Component::BoxTrunk, conv.specs());
                push(Component::BoxTrunk, residual.specs());
            }
        }
        push(Component::ClsPredictor, self.cls_predictor.specs(Init::Normal { std: 0.01 }));
        push(Component::BoxPredictor, self.box_predictor.specs(Init::Normal { std: 0.001 }));
        out
    }
}

/// Backbone blocks: 3x3 stride-2 convs, each followed by ReLU.
pub fn backbone_layers(cfg: &BackboneConfig) -> Vec<Conv> {
    (0..cfg.num_blocks)
        .map(|b| {
            let c_in = if b == 0 { 3 } else { cfg.channels };
            Conv::new(&format!("backbone.block{}", b + 1), c_in, cfg.channels, 3, 2)
        })
        .collect()
}

/// Every parameter the configuration declares, in construction order.
pub fn layout(cfg: &ModelConfig) -> Vec<(Component, ParamSpec)> {
    let mut out: Vec<(Component, ParamSpec)> = backbone_layers(&cfg.backbone)
        .iter()
        .flat_map(|c| c.specs().into_iter().map(|s| (Component::Backbone, s)))
        .collect();
    for i in 1..=cfg.num_stages() {
        out.extend(StageHead::new(i, cfg).specs());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub config: ModelConfig,
    pub backbone: Vec<Conv>,
    pub stages: Vec<StageHead>,
    pub store: ParamStore,
}

impl CascadeModel {
    /// Builds a freshly initialized model; weights are a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (_, spec) in layout(&config) {
            let tensor = spec.init.sample(&spec.shape, &mut rng);
            store.insert(Parameter::new(spec.name, tensor))?;
        }
        Ok(Self::assemble(config, store))
    }

    /// Wraps an existing parameter store (e.g. a loaded checkpoint), checking it
    /// holds exactly the parameters `config` declares.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config declares {}",
                store.len(),
                specs.len()
            )));
        }
        for (_, spec) in &specs {
            let p = store
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", spec.name)))?;
            if p.tensor.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config declares {:?}",
                    spec.name,
                    p.tensor.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self::assemble(config, store))
    }

    fn assemble(config: ModelConfig, store: ParamStore) -> Self {
        let backbone = backbone_layers(&config.backbone);
        let stages = (1..=config.num_stages()).map(|i| StageHead::new(i, &config)).collect();
        Self {
            config,
            backbone,
            stages,
            store,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `(width, height)` of input images in pixels.
    pub fn image_size(&self) -> (f64, f64) {
        (self.config.backbone.width as f64, self.config.backbone.height as f64)
    }

    pub fn spatial_scale(&self) -> f64 {
        1.0 / self.config.backbone.stride() as f64
    }

    /// Exact per-component count of this model's stored scalars.
    pub fn count_parameters(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for (component, spec) in layout(&self.config) {
            *counts.by_component.entry(component).or_default() += self.store.expect(&spec.name).numel();
        }
        counts
    }
}
