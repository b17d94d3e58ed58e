//! Run configuration: a TOML file with one section per pipeline module,
//! overridden by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;
use spdist_core::depthio::DEFAULT_UNIT_SCALE;
use spdist_core::geometry::{FilterThresholds, LabelingConfig};
use spdist_core::model::{ModelConfig, Profile};
use spdist_core::superpix::SlicParams;
use spdist_core::synth::SynthConfig;
use spdist_core::train::{TrainConfig, DEFAULT_FRACTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthioSection {
    /// Meters per stored depth unit.
    pub unit_scale: f64,
}

impl Default for DepthioSection {
    fn default() -> Self {
        DepthioSection {
            unit_scale: DEFAULT_UNIT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitsSection {
    pub fractions: Vec<f64>,
    pub n_seeds: usize,
}

impl Default for SplitsSection {
    fn default() -> Self {
        SplitsSection {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            n_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub depthio: DepthioSection,
    pub superpix: SlicParams,
    pub geometry: FilterThresholds,
    /// Replaces the profile's architecture when present.
    pub model: Option<ModelConfig>,
    /// Pretext training.
    pub train: TrainConfig,
    /// Downstream fine-tuning; `profile` and `pairs_per_frame` are taken from `train`.
    pub finetune: TrainConfig,
    pub splits: SplitsSection,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("config {}: {e}", path.display())))
    }

    /// Applies the global seed and profile so every stage sees the same values.
    pub fn apply_globals(&mut self, seed: Option<u64>, profile: Option<Profile>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        if let Some(p) = profile {
            self.train.profile = p;
        }
        self.finetune.profile = self.train.profile;
    }

    pub fn labeling(&self) -> LabelingConfig {
        LabelingConfig {
            slic: self.superpix,
            thresholds: self.geometry,
            pairs_per_frame: self.train.pairs_per_frame,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig::for_profile(self.train.profile))
    }

    pub fn validate(&self) -> spdist_core::Result<()> {
        if !(self.depthio.unit_scale > 0.0 && self.depthio.unit_scale.is_finite()) {
            return Err(spdist_core::Error::InvalidInput(format!(
                "depthio.unit_scale must be positive, got {}",
                self.depthio.unit_scale
            )));
        }
        self.superpix.validate()?;
        self.geometry.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.synth.validate()?;
        spdist_core::train::SplitPlan::new(self.splits.fractions.clone(), self.splits.n_seeds, self.seed)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sections_are_partial_and_strict() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\nepochs = 4\nprofile = \"tiny\"\n[superpix]\nn_segments = 200\n").unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.superpix.n_segments, 200);
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 4\n").is_err());
        assert!(toml::from_str::<RunConfig>("[trian]\nepochs = 4\n").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut cfg: RunConfig = toml::from_str("seed = 3\n[train]\nprofile = \"full\"\n").unwrap();
        cfg.apply_globals(Some(9), Some(Profile::Tiny));
        assert_eq!((cfg.seed, cfg.train.seed, cfg.finetune.seed), (9, 9, 9));
        assert_eq!(cfg.finetune.profile, Profile::Tiny);
        assert_eq!(cfg.model_config(), ModelConfig::tiny());
    }
}
