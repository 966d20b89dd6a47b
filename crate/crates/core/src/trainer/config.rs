//! Training configuration, stored as versioned TOML.

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::augment::AugmentPolicy;
use crate::lossmetric::{LossConfig, RegionSource};
use crate::modality::Modality;
use crate::models::{ResClassifierConfig, UNet7Config};
use crate::preproc::{CropMode, CropSpec, NormVariant};
use crate::tensor::LrSchedule;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub task: Task,
    pub folds: usize,
    /// Train and validation fractions for the segmentation hold-out.
    pub split: [f64; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    pub crop: CropSpec,
    /// Probability that a segmentation crop is tumor-centred rather than random.
    pub foreground_prob: f64,
    /// Maximum random shift, in voxels, applied to tumor-centred crops.
    pub crop_jitter: usize,
    pub channel_order: Vec<Modality>,
    pub normalization: NormVariant,
    pub region_source: RegionSource,
    /// Validate every this many epochs (the last epoch always validates).
    pub validate_every: usize,
    /// Stop after this many validations without improvement.
    pub early_stop_patience: Option<usize>,
    pub unet: UNet7Config,
    pub classifier: ResClassifierConfig,
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self {
            version: CONFIG_VERSION,
            task: Task::Segmentation,
            folds: 4,
            split: [0.8, 0.2],
            epochs: 100,
            batch_size: 1,
            seed: 0,
            lr_schedule: LrSchedule::segmentation_default(),
            loss: LossConfig::default(),
            augment: AugmentPolicy::default(),
            crop: CropSpec { size: [64; 3], mode: CropMode::Foreground(0.0) },
            foreground_prob: 0.8,
            crop_jitter: 8,
            channel_order: Modality::ALL.to_vec(),
            normalization: NormVariant::default(),
            region_source: RegionSource::default(),
            validate_every: 1,
            early_stop_patience: None,
            unet: UNet7Config::default(),
            classifier: ResClassifierConfig::default(),
        }
    }

    pub fn classification() -> Self {
        Self {
            task: Task::Classification,
            epochs: 60,
            lr_schedule: LrSchedule::classifier_default(),
            // Flips, in-plane quarter turns and noise leave fine texture intact;
            // stretch and blur would smear it.
            augment: AugmentPolicy { stretch_prob: 0.0, blur_prob: 0.0, ..AugmentPolicy::default() },
            ..Self::segmentation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        let [tr, va] = self.split;
        if !(tr > 0.0 && va >= 0.0 && (tr + va - 1.0).abs() < 1e-9) {
            return bad(format!("split fractions {tr} + {va} must be positive and sum to 1"));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return bad("batch_size and validate_every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.foreground_prob) {
            return bad(format!("foreground_prob {} outside [0, 1]", self.foreground_prob));
        }
        if self.channel_order.is_empty() {
            return bad("empty channel order".into());
        }
        self.lr_schedule.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.augment.validate().map_err(TrainError::Config)?;
        if self.task == Task::Segmentation {
            self.loss.validate(self.unet.num_classes)?;
            self.unet.validate()?;
            if self.unet.in_channels != self.channel_order.len() {
                return bad(format!(
                    "unet expects {} channels, channel_order has {}",
                    self.unet.in_channels,
                    self.channel_order.len()
                ));
            }
            let div = self.unet.divisor();
            if self.crop.size.iter().any(|&s| s == 0 || s % div != 0) {
                return bad(format!("crop {:?} must be divisible by {div}", self.crop.size));
            }
        } else {
            self.classifier.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [TrainConfig::segmentation(), TrainConfig::classification()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml();
            assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::segmentation();
        c.folds = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::segmentation();
        c.split = [0.7, 0.2];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::segmentation();
        c.crop.size = [60; 3];
        assert!(c.validate().is_err());
        let text = TrainConfig::segmentation().to_toml().replace("version = 1", "version = 2");
        assert!(TrainConfig::from_toml(&text).is_err());
    }
}
