//! TOML run configuration with desk and full-scale profiles.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPolicy, ReferencePool, DEFAULT_BINS};
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::NetworkConfig;
use crate::phantom::PhantomConfig;
use crate::ssl::{PseudoLabelFilter, ScenarioKind, ScenarioSettings};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub eval_every: usize,
    pub keep_best: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss: t.loss,
            eval_every: t.eval_every,
            keep_best: t.keep_best,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSection {
    pub rotation_ranges: Vec<(f64, f64)>,
    pub rotation_probability: f64,
    pub hflip_probability: f64,
    pub sharpen: bool,
    pub sharpen_probability: f64,
    pub histogram_match_probability: f64,
    pub histogram_bins: usize,
    pub pooled_reference: bool,
    pub exclude_zeros: bool,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        let p = AugmentationPolicy::default();
        Self {
            rotation_ranges: p.rotation_ranges,
            rotation_probability: p.rotation_probability,
            hflip_probability: p.hflip_probability,
            sharpen: p.sharpen,
            sharpen_probability: p.sharpen_probability,
            histogram_match_probability: p.histogram_match_probability,
            histogram_bins: DEFAULT_BINS,
            pooled_reference: false,
            exclude_zeros: false,
        }
    }
}

impl AugmentationSection {
    /// A policy without a reference pool.
    pub fn policy(&self, seed: u64) -> AugmentationPolicy {
        AugmentationPolicy {
            rotation_ranges: self.rotation_ranges.clone(),
            rotation_probability: self.rotation_probability,
            hflip_probability: self.hflip_probability,
            sharpen: self.sharpen,
            sharpen_probability: self.sharpen_probability,
            histogram_match: None,
            histogram_match_probability: self.histogram_match_probability,
            seed,
        }
    }

    pub fn with_pool(&self, seed: u64, pool: ReferencePool) -> AugmentationPolicy {
        AugmentationPolicy {
            histogram_match: Some(Arc::new(pool)),
            ..self.policy(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub kinds: Vec<String>,
    pub seeds: Vec<u64>,
    pub fine_tune: bool,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            kinds: ScenarioKind::ALL.iter().map(|k| k.to_string()).collect(),
            seeds: vec![0, 1, 2],
            fine_tune: false,
        }
    }
}

/// Every tunable of a run; flags on the command line override these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub augmentation: AugmentationSection,
    pub pseudo_label: PseudoLabelFilter,
    pub scenarios: ScenarioSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 64x64 crops, depth-3 base-8 network, 30 epochs.
    Desk,
    /// 224x224 crops, depth-4 base-16 network, 300 epochs, 75/75/25 patients.
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Invalid(format!("unknown profile `{other}`"))),
        }
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::default(),
            Profile::Full => Self {
                phantom: PhantomConfig {
                    image_size: 224,
                    ..PhantomConfig::full_scale()
                },
                preprocess: PreprocessConfig::full_scale(),
                network: NetworkConfig::full_scale(),
                train: TrainSection {
                    epochs: 300,
                    ..TrainSection::default()
                },
                ..Self::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.network.validate()?;
        self.pseudo_label.validate()?;
        self.train_config().validate()?;
        if !self.preprocess.crop_height.is_multiple_of(self.network.spatial_multiple())
            || !self.preprocess.crop_width.is_multiple_of(self.network.spatial_multiple())
        {
            return Err(Error::config(
                "preprocess",
                format!(
                    "crop {}x{} is not divisible by {}",
                    self.preprocess.crop_height,
                    self.preprocess.crop_width,
                    self.network.spatial_multiple()
                ),
            ));
        }
        self.scenario_kinds()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            loss: self.train.loss,
            seed: self.seed,
            augmentation: self.augmentation.policy(self.seed),
            eval_every: self.train.eval_every,
            keep_best: self.train.keep_best,
        }
    }

    pub fn scenario_settings(&self) -> ScenarioSettings {
        ScenarioSettings {
            network: self.network.clone(),
            filter: self.pseudo_label.clone(),
            histogram_bins: self.augmentation.histogram_bins,
            pooled_reference: self.augmentation.pooled_reference,
            exclude_zeros: self.augmentation.exclude_zeros,
            fine_tune: self.scenarios.fine_tune,
        }
    }

    pub fn scenario_kinds(&self) -> Result<Vec<ScenarioKind>> {
        self.scenarios.kinds.iter().map(|k| k.parse()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for p in [Profile::Desk, Profile::Full] {
            let cfg = RunConfig::profile(p);
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[network]\ndepth = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.network.depth, 2);
        assert_eq!(cfg.train, TrainSection::default());
    }
}
