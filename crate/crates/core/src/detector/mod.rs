//! Miniature anchor-free dense detector: a small strided conv backbone, a
//! feature pyramid, shared classification and regression towers, one
//! classification head per task, plus shared center-ness and side-distance
//! heads.

mod decode;
mod loss;
mod model;
mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use decode::{decode, nms, DecodeParams};
pub use loss::{detection_loss, FOCAL_ALPHA, FOCAL_GAMMA};
pub use model::{stack_images,
    cls_tower, conv_layer, features, forward, Detector, LevelOutputs, LevelVars, OutputVars, RawOutputs, HeadLogits,
    CLS_HEAD_BIAS,
};
pub use targets::{assign_targets, LevelTargets, TargetMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Pyramid / tower width.
    pub channels: usize,
    /// One stride per pyramid level; each must double the previous one.
    pub strides: Vec<usize>,
    pub tower_depth: usize,
    /// Interior boundaries on max(l, t, r, b) between consecutive levels;
    /// level `i` owns `[bounds[i-1], bounds[i])` with 0 and ∞ at the ends.
    pub level_bounds: Vec<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            in_channels: 1,
            channels: 32,
            strides: vec![8, 16],
            tower_depth: 2,
            level_bounds: vec![24.0],
        }
    }
}

impl DetectorConfig {
    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::config("at least one pyramid level is required"));
        }
        if !self.strides[0].is_power_of_two() || self.strides[0] < 2 {
            return Err(Error::config("first stride must be a power of two ≥ 2"));
        }
        for w in self.strides.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::config(format!("strides must double per level, got {:?}", self.strides)));
            }
        }
        if self.image_size % self.strides[self.strides.len() - 1] != 0 {
            return Err(Error::config("image size must be divisible by the coarsest stride"));
        }
        if self.level_bounds.len() + 1 != self.strides.len() {
            return Err(Error::config("need exactly one size boundary between consecutive levels"));
        }
        if self.level_bounds.windows(2).any(|w| w[0] >= w[1]) || self.level_bounds.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::config("level boundaries must be positive and strictly increasing"));
        }
        if self.channels == 0 || self.in_channels == 0 || self.tower_depth == 0 {
            return Err(Error::config("channel counts and tower depth must be positive"));
        }
        Ok(())
    }

    /// Half-open size range `[lo, hi)` owned by `level`.
    pub fn size_range(&self, level: usize) -> (f64, f64) {
        let lo = if level == 0 { 0.0 } else { self.level_bounds[level - 1] };
        let hi = self.level_bounds.get(level).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    pub fn feature_size(&self, level: usize) -> usize {
        self.image_size / self.strides[level]
    }

    /// Output widths of the strided backbone convolutions.
    pub fn backbone_widths(&self) -> Vec<usize> {
        let stem = self.strides[0].trailing_zeros() as usize;
        let mut widths: Vec<usize> = (0..stem)
            .map(|i| if i + 1 == stem { self.channels } else { (8usize << i).min(self.channels) })
            .collect();
        widths.extend(std::iter::repeat(self.channels).take(self.levels() - 1));
        widths
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.size_range(0), (0.0, 24.0));
        assert_eq!(c.size_range(1), (24.0, f64::INFINITY));
        assert_eq!(c.backbone_widths(), vec![8, 16, 32, 32]);
        assert_eq!(c.feature_size(0), 8);
        assert_eq!(c.feature_size(1), 4);
    }

    #[test]
    fn rejects_non_doubling_strides() {
        let c = DetectorConfig { strides: vec![8, 32], ..Default::default() };
        assert!(c.validate().is_err());
        let c = DetectorConfig { level_bounds: vec![], ..Default::default() };
        assert!(c.validate().is_err());
    }
}
