//! Resolved configuration of every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::classify::LogisticConfig;
use crate::error::{Error, Result};
use crate::gradcheck::ModelCheckConfig;
use crate::net::{NetConfig, NetVariant};
use crate::patlak::{self, WeightModel};
use crate::phantom::{InputCurve, LesionConfig, MotionConfig};
use crate::series::uniform_timing;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    /// Relative Gaussian noise level of each frame.
    pub noise_sigma: f64,
    pub frames: usize,
    /// Mid-time (min) of the first frame.
    pub first_mid: f64,
    /// Duration (min) of every frame.
    pub duration: f64,
    pub lesions: LesionConfig,
    pub input: InputCurve,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            noise_sigma: 0.02,
            frames: 8,
            first_mid: 22.5,
            duration: 5.0,
            lesions: LesionConfig::default(),
            input: InputCurve::default(),
        }
    }
}

impl PhantomConfig {
    pub fn timing(&self) -> (Vec<f64>, Vec<f64>) {
        uniform_timing(self.frames, self.first_mid, self.duration)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSetup {
    /// Inject motion at all; without it the moved series equals the clean one.
    pub enabled: bool,
    pub seed: u64,
    pub reference_index: usize,
    pub motion: MotionConfig,
}

impl Default for MotionSetup {
    fn default() -> Self {
        Self {
            enabled: true,
            seed: 1,
            reference_index: 7,
            motion: MotionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub t_star: f64,
    pub weights: WeightModel,
    pub nmi_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t_star: patlak::T_STAR,
            weights: WeightModel::default(),
            nmi_bins: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub folds: usize,
    pub seed: u64,
    pub logistic: LogisticConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            seed: 1,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of the network initialization.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub motion: MotionSetup,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub classify: ClassifyConfig,
    /// Smoothness weights of the λ sweep.
    pub lambdas: Vec<f64>,
    pub gradcheck: ModelCheckConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            phantom: PhantomConfig::default(),
            motion: MotionSetup::default(),
            net: NetConfig::new(NetVariant::BConvLstm, [16, 16, 16]),
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 1_000_000,
                max_steps: 100,
                ncc_window: 5,
                seed: 1,
                downsample_factor: 2,
                reference_index: 7,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            classify: ClassifyConfig::default(),
            lambdas: vec![0.1, 1.0, 10.0, 100.0],
            gradcheck: ModelCheckConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// The default configuration with every seed set to `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self::default();
        c.set_seed(seed);
        c
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.motion.seed = seed;
        self.train.seed = seed;
        self.classify.seed = seed;
        self.gradcheck.seed = seed;
    }

    /// Parse a possibly partial TOML document. Keys it leaves out keep the
    /// values of [`PipelineConfig::default`], also inside nested tables.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantom;
        if p.frames == 0 || !(p.duration > 0.0) || !(p.first_mid - p.duration / 2.0 >= 0.0) {
            return Err(Error::config("phantom timing needs frames > 0, a positive duration and a start at or after injection"));
        }
        if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and ≥ 0"));
        }
        p.lesions.validate()?;
        if self.motion.reference_index >= p.frames || self.train.reference_index >= p.frames {
            return Err(Error::config("reference frame index lies outside the series"));
        }
        if self.motion.reference_index != self.train.reference_index {
            return Err(Error::config("motion and training must share the reference frame"));
        }
        self.net.validate()?;
        self.train.validate()?;
        if !(self.eval.t_star >= 0.0) || self.eval.nmi_bins < 2 {
            return Err(Error::config("t_star must be ≥ 0 and nmi_bins ≥ 2"));
        }
        if self.classify.folds < 2 {
            return Err(Error::config("classification needs at least 2 folds"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("sweep lambdas must be finite and ≥ 0"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
