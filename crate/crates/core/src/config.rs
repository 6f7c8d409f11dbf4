//! Training configuration and ablation switches.
//!
//! Configs are stored as flat TOML (`key = value` per line); every key has a
//! matching CLI flag of the same name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How class weights enter the segmentation cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// Each pixel's term is scaled by the weight of its true class.
    #[default]
    PerPixel,
    /// Each image's cross-entropy is scaled by the sum of its pixels' class weights.
    PerImage,
    /// Plain cross-entropy.
    None,
}

/// Whether per-pixel loss terms are averaged or summed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// What the fusion module takes from the boundary stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryFusion {
    /// The gated boundary features before the prediction head.
    #[default]
    Features,
    /// The one-channel boundary probability map.
    Map,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `(height, width)` every input is resized to.
    pub input_size: (usize, usize),
    pub learning_rate: f64,
    /// Decay of the optimizer's squared-gradient moving average.
    pub decay: f64,
    /// Also multiply the learning rate by `decay` after every epoch.
    pub epoch_lr_decay: bool,
    pub epochs: usize,
    pub lambda_seg: f64,
    pub lambda_boundary: f64,
    pub weighting_mode: WeightingMode,
    pub reduction: Reduction,
    pub seed: u64,
    pub batch_size: usize,
    /// Every layer's filter count is divided by this (minimum one filter).
    pub width_divisor: usize,
    /// Residual units per backbone stage.
    pub backbone_blocks: [usize; 4],
    /// Depth of the 1×1 projections applied to the backbone features.
    pub context_depth: usize,
    pub boundary_fusion: BoundaryFusion,
    /// Largest spatial length `h·w` a context-aware attention map may cover.
    pub max_attention_len: usize,
    pub num_classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: (512, 512),
            learning_rate: 1e-4,
            decay: 0.995,
            epoch_lr_decay: false,
            epochs: 150,
            lambda_seg: 1.0,
            lambda_boundary: 1.0,
            weighting_mode: WeightingMode::PerPixel,
            reduction: Reduction::Mean,
            seed: 0,
            batch_size: 2,
            width_divisor: 1,
            backbone_blocks: [3, 4, 23, 3],
            context_depth: 512,
            boundary_fusion: BoundaryFusion::Features,
            max_attention_len: 8192,
            num_classes: 9,
        }
    }
}

impl TrainConfig {
    /// Reduced-size setup for CPU runs: 128×128 inputs, widths divided by 8.
    pub fn desk() -> Self {
        Self {
            input_size: (128, 128),
            width_divisor: 8,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Load(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epoch_lr_decay {
            self.learning_rate * self.decay.powi(epoch as i32)
        } else {
            self.learning_rate
        }
    }

    /// Filter count after applying the width divisor.
    pub fn width(&self, full: usize) -> usize {
        (full / self.width_divisor.max(1)).max(1)
    }
}

/// Lists every violated invariant of `cfg`; empty when the config is usable.
pub fn validate_config(cfg: &TrainConfig) -> Vec<String> {
    let mut v = Vec::new();
    if !(cfg.learning_rate > 0.0) {
        v.push("learning_rate must be > 0".to_string());
    }
    if !(cfg.decay > 0.0 && cfg.decay <= 1.0) {
        v.push("decay must be in (0,1]".to_string());
    }
    if !(cfg.lambda_seg >= 0.0) {
        v.push("lambda_seg must be >= 0".to_string());
    }
    if !(cfg.lambda_boundary >= 0.0) {
        v.push("lambda_boundary must be >= 0".to_string());
    }
    if cfg.epochs == 0 {
        v.push("epochs must be > 0".to_string());
    }
    if cfg.batch_size == 0 {
        v.push("batch_size must be > 0".to_string());
    }
    let (h, w) = cfg.input_size;
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        v.push(format!("input_size must be positive multiples of 32, got {h}x{w}"));
    }
    if !(1..=64).contains(&cfg.width_divisor) {
        v.push("width_divisor must be in 1..=64".to_string());
    }
    if cfg.backbone_blocks.contains(&0) {
        v.push("backbone_blocks entries must be > 0".to_string());
    }
    if cfg.context_depth == 0 {
        v.push("context_depth must be > 0".to_string());
    }
    if cfg.max_attention_len == 0 {
        v.push("max_attention_len must be > 0".to_string());
    }
    if !(2..=256).contains(&cfg.num_classes) {
        v.push("num_classes must be in 2..=256".to_string());
    }
    v
}

/// Architecture/loss switches for the ablation variants. All `true` is the full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_caa: bool,
    pub use_boundary_stream: bool,
    pub use_class_weighting: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_caa: true,
            use_boundary_stream: true,
            use_class_weighting: true,
        }
    }
}
