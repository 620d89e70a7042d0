//! The run configuration: every module's settings plus paths and the root
//! seed, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationSpec, FelzenszwalbParams, IntensityNormalization, PreprocessParams, SynthSpec};
use crate::encoder::{Backbone, CnnConfig, EncoderConfig, FeatureUpsample};
use crate::evaluation::{Dataset, ExperimentSpec, OrganGroup, Variant};
use crate::inference::{InferenceConfig, TttConfig};
use crate::prototype::HeadConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Generator settings used by `synth` and for synthetic runs.
    pub synth: SynthSpec,
    pub normalization: IntensityNormalization,
    pub felzenszwalb: FelzenszwalbParams,
    pub augmentation: AugmentationSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            synth: SynthSpec::default(),
            normalization: IntensityNormalization::default(),
            felzenszwalb: FelzenszwalbParams::default(),
            augmentation: AugmentationSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
    /// Cache directory, overridden by `PROTOSEG_CACHE`.
    pub cache_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ttt: TttConfig,
    pub evaluation: ExperimentSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            cache_dir: PathBuf::from(".protoseg-cache"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            ttt: TttConfig::default(),
            evaluation: ExperimentSpec::default(),
        }
    }
}

impl RunConfig {
    /// Small CNN on 64x64 synthetic volumes, a 32x32 feature grid and the last
    /// organ held out.
    pub fn synthetic() -> Self {
        let mut cfg = RunConfig::default();
        cfg.encoder = EncoderConfig {
            backbone: Backbone::DilatedCnn(CnnConfig {
                widths: vec![16, 32, 32],
                out_dim: 32,
                ..CnnConfig::default()
            }),
            train_resolution: (64, 64),
            test_resolution: (64, 64),
            feature_upsample: FeatureUpsample::Divisor(2),
            ..EncoderConfig::cnn_default()
        };
        cfg.data.felzenszwalb = FelzenszwalbParams {
            scale: 100.0,
            sigma: 0.8,
            min_size: 100,
        };
        cfg.train.episodes = 500;
        cfg.train.optimizer.lr = 5e-3;
        cfg.train.optimizer.decay_every = 200;
        cfg.train.checkpoint_every = 100;
        cfg.evaluation = ExperimentSpec {
            dataset: Dataset::Synth,
            organ_groups: vec![OrganGroup {
                name: "dark".into(),
                classes: vec!["dark".into()],
            }],
            variants: vec![Variant::Base, Variant::Cca],
            ..ExperimentSpec::default()
        };
        cfg.resolved()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let (Some(m), Some(dir)) = (cfg.data.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Copies the root seed into every component seed.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.encoder.init_seed = s;
        self.train.seed = s;
        self.ttt.seed = s;
        self.data.augmentation.seed = s;
        self.ttt.augmentation.seed = s;
        self.data.synth.seed = s;
        self.evaluation.seeds = vec![s];
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    /// sha256 of the canonical JSON form, first 16 hex digits.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::data::cache::json_digest(self)?[..16].to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.data.augmentation.validate()?;
        self.ttt.augmentation.validate()?;
        if !(self.ttt.lr.is_finite() && self.ttt.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("ttt.lr must be >= 0, got {}", self.ttt.lr)));
        }
        Ok(())
    }

    pub fn preprocess_params(&self) -> PreprocessParams {
        PreprocessParams {
            resolution: self.encoder.train_resolution,
            normalization: self.data.normalization.clone(),
            felzenszwalb: self.data.felzenszwalb.clone(),
        }
    }

    pub fn cache_root(&self) -> PathBuf {
        crate::data::cache_root(&self.cache_dir)
    }
}
