//! Parameter accounting by model component.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::config::{ModelConfig, Variant};
use super::layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    /// The two FC transforms per stage.
    ClsTrunk,
    /// The added box convolutions.
    BoxTrunk,
    ClsPredictor,
    BoxPredictor,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Backbone,
        Component::ClsTrunk,
        Component::BoxTrunk,
        Component::ClsPredictor,
        Component::BoxPredictor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::ClsTrunk => "cls_trunk",
            Component::BoxTrunk => "box_trunk",
            Component::ClsPredictor => "cls_predictor",
            Component::BoxPredictor => "box_predictor",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub by_component: BTreeMap<Component, usize>,
}

impl ParamCounts {
    pub fn get(&self, c: Component) -> usize {
        self.by_component.get(&c).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.by_component.values().sum()
    }

    /// Scalars in the feature trunks (backbone, FC and conv trunks), i.e.
    /// everything except the final predictors.
    pub fn trunk_total(&self) -> usize {
        self.get(Component::Backbone) + self.get(Component::ClsTrunk) + self.get(Component::BoxTrunk)
    }

    /// Per-component `self - other` (signed).
    pub fn delta(&self, other: &ParamCounts) -> BTreeMap<Component, i64> {
        Component::ALL
            .iter()
            .map(|&c| (c, self.get(c) as i64 - other.get(c) as i64))
            .collect()
    }
}

/// Counts scalars per component from the configuration's declared layout,
/// without allocating any weights.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCounts {
    let mut counts = ParamCounts::default();
    for c in Component::ALL {
        counts.by_component.insert(c, 0);
    }
    for (component, spec) in layout(cfg) {
        *counts.by_component.entry(component).or_default() += spec.numel();
    }
    counts
}

/// Box-trunk scalars that localization sharing adds for `channels` and
/// `stages`: two 3x3 convs on stage 1, then one 3x3 and one 1x1 per later stage.
pub fn lfs_extra_closed_form(channels: usize, stages: usize) -> usize {
    let c = channels;
    let conv3 = 9 * c * c + c;
    let conv1 = c * c + c;
    2 * conv3 + stages.saturating_sub(1) * (conv3 + conv1)
}

/// Convenience: counts for `variant` with everything else taken from `base`.
pub fn count_for_variant(base: &ModelConfig, variant: Variant) -> ParamCounts {
    let mut cfg = base.clone();
    cfg.variant = variant;
    count_parameters(&cfg)
}
