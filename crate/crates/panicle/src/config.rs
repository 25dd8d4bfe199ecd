//! Pipeline configuration, one TOML table per stage.

use std::path::Path;

use panicle_core::augment::CountStatistic;
use panicle_core::convnet::{NetConfig, TrainConfig};
use panicle_core::density::{DEFAULT_SIGMA_DETECTION, DEFAULT_SIGMA_DOT, DEFAULT_SIGMA_REGION};
use panicle_core::eval::{DEFAULT_ALPHAS, DEFAULT_BETAS};
use panicle_core::instseg::{FitnessParams, DEFAULT_ALPHA};
use panicle_core::slic::{SlicParams, SuperpixelLevel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    #[default]
    Region,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub sigma_dot: f64,
    pub sigma_region: f64,
    pub sigma_det: f64,
    /// Annotation kind the count network regresses.
    pub target: TargetSource,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            sigma_dot: DEFAULT_SIGMA_DOT,
            sigma_region: DEFAULT_SIGMA_REGION,
            sigma_det: DEFAULT_SIGMA_DETECTION,
            target: TargetSource::Region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicConfig {
    pub compactness: f64,
    pub iterations: usize,
    /// Granularity used for segmentation and model guesses.
    pub level: SuperpixelLevel,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self { compactness: 10.0, iterations: 10, level: SuperpixelLevel::Small }
    }
}

impl SlicConfig {
    pub fn params(&self, level: SuperpixelLevel) -> SlicParams {
        SlicParams { target_size: level.target_size(), compactness: self.compactness, iterations: self.iterations }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetPreset {
    #[default]
    Ours,
    Ccnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub preset: NetPreset,
    /// Hidden widths are divided by this.
    pub width_divisor: usize,
    /// Append the thermal-time channel to the RGB input.
    pub thermal: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { preset: NetPreset::Ours, width_divisor: 4, thermal: true }
    }
}

impl NetSection {
    pub fn config(&self, input_channels: usize) -> NetConfig {
        let base = match self.preset {
            NetPreset::Ours => NetConfig::ours(input_channels),
            NetPreset::Ccnn => NetConfig::ccnn(input_channels),
        };
        base.scaled_width(self.width_divisor.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountSection {
    /// Feed the detection network's output as an extra input channel.
    pub detection_channel: bool,
    pub statistic: CountStatistic,
}

impl Default for CountSection {
    fn default() -> Self {
        Self { detection_channel: true, statistic: CountStatistic::Median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
    pub beta: f64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub iou_threshold: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        let f = FitnessParams::default();
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: f.gamma,
            delta: f.delta,
            beta: f.beta,
            alphas: DEFAULT_ALPHAS.to_vec(),
            betas: DEFAULT_BETAS.to_vec(),
            iou_threshold: 0.5,
        }
    }
}

impl SegmentConfig {
    pub fn fitness(&self) -> FitnessParams {
        FitnessParams { gamma: self.gamma, delta: self.delta, beta: self.beta }
    }
}

/// Held-out groups for cross-validation; empty trains on everything.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub density: DensityConfig,
    pub slic: SlicConfig,
    pub net: NetSection,
    pub train_detect: TrainConfig,
    pub train_count: TrainConfig,
    pub count: CountSection,
    pub segment: SegmentConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig { lr: 0.1, random_dihedral: true, ..TrainConfig::default() };
        Self {
            seed: 42,
            density: DensityConfig::default(),
            slic: SlicConfig::default(),
            net: NetSection::default(),
            train_detect: TrainConfig { epochs: 20, lr_decay: 0.9, ..train.clone() },
            train_count: TrainConfig { epochs: 40, lr_decay: 0.95, ..train },
            count: CountSection::default(),
            segment: SegmentConfig::default(),
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let d = &self.density;
        if !(d.sigma_dot > 0.0 && d.sigma_region > 0.0 && d.sigma_det > 0.0) {
            return Err("density sigmas must be positive".into());
        }
        let s = &self.segment;
        if !(s.alpha > 0.0 && s.alpha < 1.0) || s.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err("alpha values must lie in (0, 1)".into());
        }
        if !(s.gamma > 0.0 && s.delta > 0.0 && s.beta > 0.0) || s.betas.iter().any(|b| *b <= 0.0) {
            return Err("gamma, delta and beta values must be positive".into());
        }
        if !(s.iou_threshold > 0.0 && s.iou_threshold <= 1.0) {
            return Err("iou_threshold must lie in (0, 1]".into());
        }
        if self.net.width_divisor == 0 {
            return Err("width_divisor must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Input channels of the detection network.
    pub fn detect_channels(&self) -> usize {
        3 + usize::from(self.net.thermal)
    }

    /// Input channels of the count network.
    pub fn count_channels(&self) -> usize {
        self.detect_channels() + usize::from(self.count.detection_channel)
    }
}
