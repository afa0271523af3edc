//! Desk-scale semi-supervised training on synthetic Gaussian mixtures.

pub mod dataset;
pub mod model;
pub mod train;

use thiserror::Error;

use crate::debiaser::DebiaserError;
use crate::simplex::SimplexError;

pub use dataset::{
    augment, circle_means, generate_dataset, longtail_counts, Features, LabeledSet, SynthDataset,
    SynthDatasetSpec,
};
pub use model::{softmax, ClassifierParams, ModelKind};
pub use train::{
    loss_and_grad, lr_schedule, train, AugmentedBatch, MetricsHistory, MetricsRow, StepOutput,
    TrainConfig, TrainingData,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("imbalance ratio {0} must be >= 1")]
    InvalidGamma(f64),
    #[error("degenerate dataset spec: {0}")]
    DegenerateSpec(String),
    #[error("non-finite logit {0}")]
    NonFiniteLogit(f64),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Debiaser(#[from] DebiaserError),
}
