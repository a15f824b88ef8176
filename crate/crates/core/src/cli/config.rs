use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curvature::{Damping, OptimizerConfig, OptimizerKind};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η·½(1 + cos(πk/K))` over all `K` steps, no restarts
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total == 0 => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// per-example shape to reinterpret flat examples as, e.g. `[1, 28, 28]`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    /// keep only the first `limit` examples after loading
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

/// Optimizer name plus optional overrides of its default profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    pub name: OptimizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoupled_wd: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<Damping>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_cov: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_inv: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precomputed_first_layer: Option<bool>,
}

impl OptimizerBlock {
    pub fn named(name: OptimizerKind) -> Self {
        OptimizerBlock {
            name,
            lr: None,
            momentum: None,
            weight_decay: None,
            decoupled_wd: None,
            ema_beta2: None,
            damping: None,
            tau_cov: None,
            tau_inv: None,
            adam_beta1: None,
            adam_beta2: None,
            adam_eps: None,
            precomputed_first_layer: None,
        }
    }

    pub fn resolve(&self) -> OptimizerConfig {
        let p = OptimizerConfig::profile(self.name);
        OptimizerConfig {
            optimizer: self.name,
            lr: self.lr.unwrap_or(p.lr),
            momentum: self.momentum.unwrap_or(p.momentum),
            weight_decay: self.weight_decay.unwrap_or(p.weight_decay),
            decoupled_wd: self.decoupled_wd.unwrap_or(p.decoupled_wd),
            ema_beta2: self.ema_beta2.unwrap_or(p.ema_beta2),
            damping: self.damping.unwrap_or(p.damping),
            tau_cov: self.tau_cov.unwrap_or(p.tau_cov),
            tau_inv: self.tau_inv.unwrap_or(p.tau_inv),
            adam_beta1: self.adam_beta1.unwrap_or(p.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(p.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(p.adam_eps),
            precomputed_first_layer: self
                .precomputed_first_layer
                .unwrap_or(p.precomputed_first_layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// write a step record every this many steps
    #[serde(default = "one")]
    pub log_every: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub optimizer: OptimizerBlock,
    pub schedule: ScheduleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        self.optimizer.resolve().validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::Config(
                "schedule.batch_size: must be at least 1".into(),
            ));
        }
        if self.schedule.log_every == 0 {
            return Err(Error::Config(
                "schedule.log_every: must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(
                "data.test_fraction: must lie in [0, 1)".into(),
            ));
        }
        if let Some(shape) = &self.data.shape {
            if shape != &self.model.input {
                return Err(Error::Config(format!(
                    "data.shape {shape:?} does not match model.input {:?}",
                    self.model.input
                )));
            }
        }
        // building the model checks layer shapes against the input
        Model::new(self.model.clone(), self.seed)
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }
}
