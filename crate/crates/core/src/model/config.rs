//! Model configuration and its TOML file format.
//!
//! ```toml
//! variant = "fscascade"          # baseline | cfs | lfs | fscascade
//! num_classes = 3                # foreground classes K; logits have K + 1 columns
//! pooled_size = 7
//! hidden_width = 256
//! stage_iou_thresholds = [0.5, 0.6, 0.7]
//! delta_stds = [[0.1, 0.1, 0.2, 0.2], [0.05, 0.05, 0.1, 0.1], [0.033, 0.033, 0.067, 0.067]]
//! detach_shared_cls = false
//!
//! [backbone]
//! height = 96
//! width = 96
//! channels = 64
//! num_blocks = 3
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature-sharing mechanisms a cascade uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain cascade: FC trunk per stage, boxes regressed from the FC trunk.
    Baseline,
    /// Classification feature sharing only.
    Cfs,
    /// Localization feature sharing (conv box trunk with the serial residual chain) only.
    Lfs,
    /// Both.
    #[serde(rename = "fscascade")]
    FsCascade,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Cfs, Variant::Lfs, Variant::FsCascade];

    /// Whether classification sums the FC transforms of all stages so far.
    pub fn shares_classification(self) -> bool {
        matches!(self, Variant::Cfs | Variant::FsCascade)
    }

    /// Whether boxes come from the convolutional trunk with the residual chain.
    pub fn conv_box_trunk(self) -> bool {
        matches!(self, Variant::Lfs | Variant::FsCascade)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cfs => "cfs",
            Variant::Lfs => "lfs",
            Variant::FsCascade => "fscascade",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected baseline, cfs, lfs or fscascade)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            channels: 64,
            num_blocks: 3,
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.num_blocks
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / self.stride(), self.width / self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stride();
        if self.height == 0 || self.width == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be positive and divisible by 2^{}",
                self.height, self.width, self.num_blocks
            )));
        }
        if self.channels < 8 {
            return Err(Error::Config(format!("backbone channels {} must be >= 8", self.channels)));
        }
        Ok(())
    }
}

pub const DEFAULT_STAGE_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

pub const DEFAULT_DELTA_STDS: [[f64; 4]; 3] = [
    [0.1, 0.1, 0.2, 0.2],
    [0.05, 0.05, 0.1, 0.1],
    [0.033, 0.033, 0.067, 0.067],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub pooled_size: usize,
    pub hidden_width: usize,
    pub stage_iou_thresholds: Vec<f64>,
    pub delta_stds: Vec<[f64; 4]>,
    #[serde(default)]
    pub detach_shared_cls: bool,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FsCascade,
            num_classes: 3,
            pooled_size: 7,
            hidden_width: 256,
            stage_iou_thresholds: DEFAULT_STAGE_THRESHOLDS.to_vec(),
            delta_stds: DEFAULT_DELTA_STDS.to_vec(),
            detach_shared_cls: false,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Default desk-scale configuration with the given variant and stage count
    /// (stage `i` takes the `i`-th default threshold and delta stds).
    pub fn desk(variant: Variant, stages: usize) -> Self {
        let stages = stages.clamp(1, 3);
        Self {
            variant,
            stage_iou_thresholds: DEFAULT_STAGE_THRESHOLDS[..stages].to_vec(),
            delta_stds: DEFAULT_DELTA_STDS[..stages].to_vec(),
            ..Self::default()
        }
    }

    /// Channel and width sizes used for the parameter-count comparisons at
    /// the original head scale (256 channels, 1024-d FC layers).
    pub fn full_scale(variant: Variant, stages: usize) -> Self {
        let mut cfg = Self::desk(variant, stages);
        cfg.backbone.channels = 256;
        cfg.hidden_width = 1024;
        cfg
    }

    pub fn num_stages(&self) -> usize {
        self.stage_iou_thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.pooled_size == 0 || self.hidden_width == 0 {
            return Err(Error::Config("pooled_size and hidden_width must be positive".into()));
        }
        let t = &self.stage_iou_thresholds;
        if t.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if t.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::Config(format!("stage IoU thresholds {t:?} must lie in (0, 1)")));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("stage IoU thresholds {t:?} must be strictly increasing")));
        }
        if self.delta_stds.len() != t.len() {
            return Err(Error::Config(format!(
                "{} delta_stds entries for {} stages",
                self.delta_stds.len(),
                t.len()
            )));
        }
        if self.delta_stds.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("delta stds must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
