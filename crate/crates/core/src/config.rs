//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 7                 # master seed; --seed overrides
//!
//! [dataset]                # synthetic data
//! [trainer]                # SGD loop
//! [debiaser]               # thresholds, momenta, feature toggles
//! [sim]                    # categorical bias-amplification sweep
//! [logistic]               # 1-D logistic dynamics
//! [ablate]                 # variant list for `ablate`
//! ```
//!
//! Every field is optional. Unset debiaser fields come from the balanced or
//! long-tail preset chosen by `dataset.gamma`; unset augmentation scales
//! come from `dataset.sigma_class`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias_sim::{self, CategoricalSimConfig, LogisticSimConfig};
use crate::debiaser::{DebiaserConfig, WeightLowerMode};
use crate::synth_ssl::{circle_means, ModelKind, SynthDatasetSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub dataset: DatasetSection,
    pub trainer: TrainerSection,
    pub debiaser: DebiaserSection,
    pub sim: SimSection,
    pub logistic: LogisticSimConfig,
    pub ablate: AblateSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub dim: usize,
    /// Explicit class means; when absent they are placed on a circle.
    pub means: Option<Vec<Vec<f64>>>,
    pub mean_radius: f64,
    pub sigma_class: f64,
    pub n_labeled_head: usize,
    pub n_unlabeled_head: usize,
    pub gamma: f64,
    pub n_test_per_class: usize,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 2,
            means: None,
            mean_radius: 3.0,
            sigma_class: 1.0,
            n_labeled_head: 25,
            n_unlabeled_head: 500,
            gamma: 1.0,
            n_test_per_class: 250,
            seed: None,
        }
    }
}

impl DatasetSection {
    pub fn resolve(&self, master_seed: u64) -> Result<SynthDatasetSpec, ConfigError> {
        let means = self
            .means
            .clone()
            .unwrap_or_else(|| circle_means(self.num_classes, self.dim, self.mean_radius));
        let spec = SynthDatasetSpec {
            num_classes: self.num_classes,
            dim: self.dim,
            means,
            sigma_class: self.sigma_class,
            n_labeled_head: self.n_labeled_head,
            n_unlabeled_head: self.n_unlabeled_head,
            gamma: self.gamma,
            n_test_per_class: self.n_test_per_class,
            seed: self.seed.unwrap_or(master_seed),
        };
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiaserSection {
    pub tau: Option<f64>,
    pub lambda_model: Option<f64>,
    pub lambda_target: Option<f64>,
    pub enable_rescale: Option<bool>,
    pub enable_reweight: Option<bool>,
    pub enable_clipping: Option<bool>,
    pub enable_target_update: Option<bool>,
    pub weight_lower_mode: Option<WeightLowerMode>,
}

impl DebiaserSection {
    pub fn resolve(&self, num_classes: usize, gamma: f64) -> Result<DebiaserConfig, ConfigError> {
        let mut c = if gamma > 1.0 {
            DebiaserConfig::imbalanced(num_classes)
        } else {
            DebiaserConfig::balanced(num_classes)
        };
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.lambda_model {
            c.lambda_model = v;
        }
        if let Some(v) = self.lambda_target {
            c.lambda_target = v;
        }
        if let Some(v) = self.enable_rescale {
            c.enable_rescale = v;
        }
        if let Some(v) = self.enable_reweight {
            c.enable_reweight = v;
        }
        if let Some(v) = self.enable_clipping {
            c.enable_clipping = v;
        }
        if let Some(v) = self.enable_target_update {
            c.enable_target_update = v;
        }
        if let Some(v) = self.weight_lower_mode {
            c.weight_lower_mode = v;
        }
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub model: Option<ModelKind>,
    pub steps: Option<usize>,
    pub warmup: Option<usize>,
    pub lr: Option<f64>,
    pub batch_l: Option<usize>,
    pub batch_u: Option<usize>,
    pub sigma_weak: Option<f64>,
    pub sigma_strong: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub eval_every: Option<usize>,
}

impl TrainerSection {
    pub fn resolve(
        &self,
        spec: &SynthDatasetSpec,
        debiaser: DebiaserConfig,
    ) -> Result<TrainConfig, ConfigError> {
        let d = TrainConfig::for_dataset(spec);
        let cfg = TrainConfig {
            model: self.model.unwrap_or(d.model),
            steps: self.steps.unwrap_or(d.steps),
            warmup: self.warmup.unwrap_or(d.warmup),
            lr: self.lr.unwrap_or(d.lr),
            batch_l: self.batch_l.unwrap_or(d.batch_l),
            batch_u: self.batch_u.unwrap_or(d.batch_u),
            sigma_weak: self.sigma_weak.unwrap_or(d.sigma_weak),
            sigma_strong: self.sigma_strong.unwrap_or(d.sigma_strong),
            debiaser,
            seeds: self.seeds.clone().unwrap_or(d.seeds),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
        };
        if cfg.seeds.is_empty() {
            return Err(ConfigError::Invalid("trainer.seeds is empty".into()));
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub p1_init_grid: Vec<f64>,
    pub n_list: Vec<usize>,
    pub steps: usize,
    pub trajectories: usize,
    pub eta: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = CategoricalSimConfig::default();
        Self {
            p1_init_grid: d.p1_init_grid,
            n_list: vec![2, 4, 8, 16, 64],
            steps: d.steps,
            trajectories: d.trajectories,
            eta: d.eta,
        }
    }
}

impl SimSection {
    pub fn resolve(&self, seed: u64) -> Result<CategoricalSimConfig, ConfigError> {
        let cfg = CategoricalSimConfig {
            p1_init_grid: self.p1_init_grid.clone(),
            n: self.n_list.first().copied().unwrap_or(1),
            steps: self.steps,
            trajectories: self.trajectories,
            eta: self.eta,
            seed,
        };
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(ConfigError::Invalid("sim.n_list needs entries >= 1".into()));
        }
        if self.trajectories == 0 {
            return Err(ConfigError::Invalid("sim.trajectories must be >= 1".into()));
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn validate_logistic(cfg: &LogisticSimConfig) -> Result<(), ConfigError> {
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    bias_sim::logistic_h(cfg.tau).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(())
}

/// Debiaser variants compared by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRescale,
    NoReweight,
    NoTargetUpdate,
    NoClipping,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoRescale,
        Variant::NoReweight,
        Variant::NoTargetUpdate,
        Variant::NoClipping,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRescale => "no_rescale",
            Variant::NoReweight => "no_reweight",
            Variant::NoTargetUpdate => "no_target_update",
            Variant::NoClipping => "no_clipping",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Applies the variant to a fully-enabled config.
    pub fn apply(self, base: &DebiaserConfig) -> DebiaserConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoRescale => c.enable_rescale = false,
            Variant::NoReweight => c.enable_reweight = false,
            Variant::NoTargetUpdate => c.enable_target_update = false,
            Variant::NoClipping => c.enable_clipping = false,
            Variant::Baseline => {
                c.enable_rescale = false;
                c.enable_reweight = false;
                c.enable_clipping = false;
                c.enable_target_update = false;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
        }
    }
}
