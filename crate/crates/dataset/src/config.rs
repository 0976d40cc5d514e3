use std::path::{Path, PathBuf};

use layered_core::edges::CannyParams;
use layered_core::mask::MaskParams;
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Result};

/// Every rate and threshold the builders use. Loaded from TOML; any field
/// left out takes its default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Independent probability of each foreground augmentation.
    pub augment_probability: f64,
    /// Inclusive range for the number of background brush masks.
    pub background_masks: [usize; 2],
    /// Gray level painted under the background masks.
    pub background_fill: f64,
    /// Margin around the foreground box that background masks never touch.
    /// `None` uses 5% of the shorter image side, at least 2 px.
    pub bbox_margin: Option<usize>,
    /// Brush radius range as a fraction of the shorter image side.
    pub brush_radius: [f64; 2],
    /// Side of the color cue map; `None` keeps the image size.
    pub color_cue_size: Option<usize>,
    pub mask: MaskParams,
    /// Run the three-threshold prescreen before deriving spatial masks.
    pub prescreen: bool,
    pub canny: CannyParams,
    /// Extra file-backed extractors, `name → directory of <stem>.png`.
    pub extractors: Vec<ExternalExtractor>,
    /// Removal records to emit; `None` emits one per input.
    pub removal_count: Option<usize>,
    /// Fraction of inputs that must yield a record for a build to succeed.
    pub min_success_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalExtractor {
    pub name: String,
    pub dir: PathBuf,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            augment_probability: 0.7,
            background_masks: [1, 3],
            background_fill: 0.5,
            bbox_margin: None,
            brush_radius: [0.02, 0.08],
            color_cue_size: None,
            mask: MaskParams::default(),
            prescreen: true,
            canny: CannyParams::default(),
            extractors: Vec::new(),
            removal_count: None,
            min_success_ratio: 0.95,
        }
    }
}

impl DatasetConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: DatasetConfig = toml::from_str(s).map_err(|e| DatasetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return bad("augment_probability must lie in [0, 1]");
        }
        if self.background_masks[0] > self.background_masks[1] {
            return bad("background_masks must be [min, max] with min <= max");
        }
        if !(0.0..=1.0).contains(&self.background_fill) {
            return bad("background_fill must lie in [0, 1]");
        }
        let [r0, r1] = self.brush_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("brush_radius must be [min, max] with 0 < min <= max");
        }
        if self.color_cue_size == Some(0) {
            return bad("color_cue_size must be positive");
        }
        if !(self.mask.threshold > 0.0) {
            return bad("mask.threshold must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_success_ratio) {
            return bad("min_success_ratio must lie in [0, 1]");
        }
        self.canny.validate()?;
        Ok(())
    }

    /// All augmentations and background masks switched off.
    pub fn degenerate() -> Self {
        Self { augment_probability: 0.0, background_masks: [0, 0], ..Self::default() }
    }

    pub fn margin_for(&self, width: usize, height: usize) -> usize {
        self.bbox_margin
            .unwrap_or_else(|| ((width.min(height) as f64 * 0.05).round() as usize).max(2))
    }
}
