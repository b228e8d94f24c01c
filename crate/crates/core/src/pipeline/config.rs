use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::handmodel::{make_default_rig, HandRig, DEFAULT_VERTICES};
use crate::ssm::{ScanOrder, VmBlockConfig};

/// Source of the hand rig used by the mesh layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HandModelConfig {
    Procedural { vertices: usize, seed: u64 },
    File { path: PathBuf },
}

impl Default for HandModelConfig {
    fn default() -> Self {
        HandModelConfig::Procedural {
            vertices: DEFAULT_VERTICES,
            seed: 0,
        }
    }
}

impl HandModelConfig {
    pub fn build(&self) -> Result<HandRig> {
        match self {
            HandModelConfig::Procedural { vertices, seed } => make_default_rig(*seed, *vertices),
            HandModelConfig::File { path } => HandRig::load_json(path),
        }
    }
}

/// Network hyperparameters. Defaults are the toy profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Backbone output channels `C`; each hand branch carries `C/4`.
    pub backbone_channels: usize,
    /// Stride-2 stages in the backbone; the feature map is `H / 2^stages`.
    pub backbone_stages: usize,
    pub joints: usize,
    pub depth_bins: usize,
    /// VMBlocks in the interaction block (width `2c`).
    pub ife_depth: usize,
    /// VMBlocks refining joint features (width `c`).
    pub jvm_depth: usize,
    pub vmblock: VmBlockConfig,
    pub scan_order: ScanOrder,
    /// One heatmap/depth head for both hands instead of one per hand.
    pub share_hjfe: bool,
    /// Millimeters per unit of the relative-translation head output.
    pub translation_scale: f64,
    pub hand_model: HandModelConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineConfig {
    pub fn toy() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            backbone_channels: 64,
            backbone_stages: 3,
            joints: 21,
            depth_bins: 16,
            ife_depth: 2,
            jvm_depth: 2,
            vmblock: VmBlockConfig::default(),
            scan_order: ScanOrder::RowMajor,
            share_hjfe: true,
            translation_scale: 100.0,
            hand_model: HandModelConfig::default(),
            seed: 0,
        }
    }

    /// 256×256 input, `C = 2048`, feature maps at `H/32`.
    pub fn full() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            backbone_channels: 2048,
            backbone_stages: 5,
            depth_bins: 64,
            hand_model: HandModelConfig::Procedural { vertices: 778, seed: 0 },
            ..Self::toy()
        }
    }

    pub fn hand_channels(&self) -> usize {
        self.backbone_channels / 4
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let d = 1 << self.backbone_stages;
        (self.image_height / d, self.image_width / d)
    }

    /// Output channels of backbone stage `i`: doubling up to `C`, at least 8.
    pub fn stage_channels(&self, i: usize) -> usize {
        let shift = self.backbone_stages - 1 - i;
        (self.backbone_channels >> shift).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("backbone_channels", self.backbone_channels),
            ("backbone_stages", self.backbone_stages),
            ("joints", self.joints),
            ("vmblock.state_dim", self.vmblock.state_dim),
            ("vmblock.expansion", self.vmblock.expansion),
            ("vmblock.conv_width", self.vmblock.conv_width),
            ("vmblock.mlp_ratio", self.vmblock.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.backbone_stages > 8 {
            return bad("backbone_stages must be at most 8".into());
        }
        let d = 1 << self.backbone_stages;
        if !self.image_height.is_multiple_of(d) || !self.image_width.is_multiple_of(d) {
            return bad(format!("image size must be divisible by {d}"));
        }
        if !self.backbone_channels.is_multiple_of(4) {
            return bad("backbone_channels must be divisible by 4".into());
        }
        if self.depth_bins < 2 {
            return bad("depth_bins must be at least 2".into());
        }
        if !(self.vmblock.dt_min > 0.0 && self.vmblock.dt_min <= self.vmblock.dt_max) {
            return bad("vmblock dt range must satisfy 0 < dt_min <= dt_max".into());
        }
        if !(self.translation_scale.is_finite() && self.translation_scale > 0.0) {
            return bad("translation_scale must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        PipelineConfig::toy().validate().unwrap();
        PipelineConfig::full().validate().unwrap();
        assert_eq!(PipelineConfig::toy().feature_size(), (8, 8));
        assert_eq!(PipelineConfig::full().feature_size(), (8, 8));
        assert_eq!(PipelineConfig::toy().hand_channels(), 16);
        assert_eq!(PipelineConfig::full().hand_channels(), 512);
        let toy = PipelineConfig::toy();
        assert_eq!(
            (0..3).map(|i| toy.stage_channels(i)).collect::<Vec<_>>(),
            vec![16, 32, 64]
        );
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = PipelineConfig::full();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = PipelineConfig::from_json(r#"{"joints": 5, "seed": 3}"#).unwrap();
        assert_eq!(partial.joints, 5);
        assert_eq!(partial.image_height, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_json(r#"{"jionts": 5}"#).unwrap_err().to_string();
        assert!(err.contains("jionts"), "{err}");
        assert!(PipelineConfig::from_json(r#"{"vmblock": {"state": 4}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_json(r#"{"image_height": 60}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"depth_bins": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"backbone_channels": 30}"#).is_err());
    }
}
