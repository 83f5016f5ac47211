//! Training configuration, stored as TOML.

use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::estimators::{AtmosphericConfig, TransmissionConfig};
use crate::ipudn::IpudnConfig;
use crate::pipeline::data::HazeSampling;
use crate::quality::{FeatureExtractor, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    /// Side of the generated square scenes.
    pub image_size: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub batch_updates_per_iteration: usize,
    pub lr_initial: f64,
    /// Iterations between learning-rate halvings.
    pub lr_decay_halving_period: usize,
    pub estimator_lr_ratio: f64,
    pub t1: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub beta_range: [f64; 2],
    pub a_range: [f64; 2],
    pub cast_probability: f64,
    /// Held-out validation scenes; each is hazed at three levels.
    pub val_scenes: usize,
    /// Samples whose priors are computed once for stages 2 and 3.
    pub train_pool: usize,
    pub perceptual_seed: u64,
    pub transmission: TransmissionConfig,
    pub atmospheric: AtmosphericConfig,
    pub ipudn: IpudnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let haze = HazeSampling::default();
        TrainConfig {
            stage: 1,
            image_size: 64,
            patch_size: 64,
            batch_size: 4,
            iterations: 40,
            batch_updates_per_iteration: 50,
            lr_initial: 1e-4,
            lr_decay_halving_period: 50,
            estimator_lr_ratio: 0.1,
            t1: 6,
            loss: LossConfig::default(),
            seed: 0,
            beta_range: haze.beta_range,
            a_range: haze.a_range,
            cast_probability: haze.cast_probability,
            val_scenes: 16,
            train_pool: 512,
            perceptual_seed: FeatureExtractor::DEFAULT_SEED,
            transmission: TransmissionConfig::default(),
            atmospheric: AtmosphericConfig::default(),
            ipudn: IpudnConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default schedule for `stage`: 2k, 6k and 2k updates.
    pub fn for_stage(stage: u8) -> Self {
        let iterations = match stage {
            2 => 120,
            _ => 40,
        };
        TrainConfig {
            stage,
            iterations,
            ..TrainConfig::default()
        }
    }

    /// Single-core preset: narrow networks and small patches so that all
    /// three stages finish in minutes.
    pub fn desk(stage: u8) -> Self {
        let (iterations, updates, lr) = match stage {
            1 => (20, 100, 2e-3),
            2 => (30, 200, 1e-3),
            _ => (20, 100, 2e-4),
        };
        TrainConfig {
            stage,
            patch_size: 24,
            iterations,
            batch_updates_per_iteration: updates,
            lr_initial: lr,
            lr_decay_halving_period: 8,
            train_pool: 192,
            transmission: TransmissionConfig {
                widths: vec![8, 16, 16],
            },
            atmospheric: AtmosphericConfig {
                widths: vec![8, 16, 16],
                groups: 4,
                ..AtmosphericConfig::default()
            },
            ipudn: IpudnConfig {
                features: 8,
                res_blocks: 2,
                updater_width: 8,
                updater_blocks: 2,
                ..IpudnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn haze_sampling(&self) -> HazeSampling {
        HazeSampling {
            beta_range: self.beta_range,
            a_range: self.a_range,
            cast_probability: self.cast_probability,
        }
    }

    /// Learning rate in effect during `iteration` (zero-based).
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let halvings = iteration / self.lr_decay_halving_period.max(1);
        self.lr_initial * 0.5f64.powi(halvings.min(1000) as i32)
    }

    pub fn total_updates(&self) -> usize {
        self.iterations * self.batch_updates_per_iteration
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(DehazeError::Config(format!("{field}: {why}")));
        if !(1..=3).contains(&self.stage) {
            return bad("stage", "must be 1, 2 or 3");
        }
        for (field, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("batch_updates_per_iteration", self.batch_updates_per_iteration),
            ("lr_decay_halving_period", self.lr_decay_halving_period),
            ("t1", self.t1),
            ("val_scenes", self.val_scenes),
            ("train_pool", self.train_pool),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.patch_size > self.image_size {
            return bad("patch_size", "exceeds image_size");
        }
        if self.image_size < crate::estimators::MIN_ATMOSPHERIC_INPUT {
            return bad("image_size", "the airlight estimator needs at least 64 pixels");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial", "must be positive");
        }
        if !(self.estimator_lr_ratio > 0.0 && self.estimator_lr_ratio.is_finite()) {
            return bad("estimator_lr_ratio", "must be positive");
        }
        self.haze_sampling()
            .validate()
            .map_err(|e| DehazeError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| DehazeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [TrainConfig::for_stage(2), TrainConfig::desk(3)] {
            assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = TrainConfig::from_toml("stage = 2\nseed = 9\n[ipudn]\nfeatures = 16\n").unwrap();
        assert_eq!(cfg.stage, 2);
        assert_eq!(cfg.ipudn.features, 16);
        assert_eq!(cfg.ipudn.res_blocks, 6);
        assert_eq!(cfg.estimator_lr_ratio, 0.1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_toml("stages = 2").is_err());
        assert!(TrainConfig::from_toml("stage = 4").is_err());
        assert!(TrainConfig::from_toml("patch_size = 0").is_err());
        assert!(TrainConfig::from_toml("beta_range = [2.0, 1.0]").is_err());
    }

    #[test]
    fn learning_rate_halves_per_period() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 1e-4);
        assert_eq!(cfg.learning_rate(49), 1e-4);
        assert_eq!(cfg.learning_rate(50), 5e-5);
        assert_eq!(cfg.learning_rate(100), 2.5e-5);
    }

    #[test]
    fn default_schedules_match_desk_budget() {
        assert_eq!(TrainConfig::for_stage(1).total_updates(), 2000);
        assert_eq!(TrainConfig::for_stage(2).total_updates(), 6000);
        assert_eq!(TrainConfig::for_stage(3).total_updates(), 2000);
    }
}
