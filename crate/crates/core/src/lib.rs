//! Debiased pseudo-label generation for semi-supervised classification,
//! with the simulations and desk-scale training harness used to study it.

pub mod bias_sim;
pub mod cli;
pub mod config;
pub mod debiaser;
pub mod metrics;
pub mod quadrature;
pub mod simplex;
pub mod synth_ssl;

pub use debiaser::{DebiaserConfig, DebiaserState, PseudoBatch, WeightLowerMode};
pub use simplex::{PositiveVector, SimplexVector};
