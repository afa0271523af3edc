//! Self-training bias-amplification simulations.
//!
//! Two toy models of a learner that trains on its own pseudo-labels:
//!
//! * **categorical**: a two-class distribution `p(θ) = (1/(1+e^θ), e^θ/(1+e^θ))`
//!   draws `n` samples from itself every step and takes one gradient step on
//!   `KL(p̃ ‖ p(θ))`, i.e. `θ ← θ - η (p̃₁ - p₁(θ))`. A trajectory is
//!   *amplified* when its KL to the uniform truth is larger at the end than
//!   at the start.
//! * **logistic**: a 1-D logistic model `g(x; b) = σ(x + b)` whose
//!   thresholded pseudo-labels feed a weighted cross-entropy; the expected
//!   gradient in `b` is `w₀ Q₀ - w₁ Q₁`, computed by quadrature.
//!
//! Every categorical trajectory owns a ChaCha stream keyed by
//! `(seed, grid index, trajectory index)`, so results do not depend on how
//! trajectories are scheduled across threads.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{self, QuadratureError};
use crate::simplex::{self, SimplexVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiasSimError {
    #[error("probability {0} is outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("threshold {0} is outside (0.5, 1)")]
    ThresholdOutOfRange(f64),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// 20 evenly spaced initial probabilities from 0.05 to 0.95.
pub fn default_grid() -> Vec<f64> {
    let n = 20;
    (0..n)
        .map(|i| 0.05 + 0.9 * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoricalSimConfig {
    pub p1_init_grid: Vec<f64>,
    /// Samples drawn per step.
    pub n: usize,
    pub steps: usize,
    pub trajectories: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for CategoricalSimConfig {
    fn default() -> Self {
        Self {
            p1_init_grid: default_grid(),
            n: 4,
            steps: 1000,
            trajectories: 1000,
            eta: 1.0,
            seed: 0,
        }
    }
}

impl CategoricalSimConfig {
    pub fn validate(&self) -> Result<(), BiasSimError> {
        if self.n == 0 {
            return Err(BiasSimError::InvalidConfig("n must be >= 1".into()));
        }
        if !self.eta.is_finite() {
            return Err(BiasSimError::InvalidConfig(format!("eta = {}", self.eta)));
        }
        for &p in &self.p1_init_grid {
            if !(p > 0.0 && p < 1.0) {
                return Err(BiasSimError::ProbabilityOutOfRange(p));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryResult {
    pub theta_init: f64,
    pub theta_final: f64,
    pub kl_init: f64,
    pub kl_final: f64,
    pub amplified: bool,
}

/// `p₁(θ) = 1 / (1 + e^θ)`, evaluated without overflow.
pub fn p1_of_theta(theta: f64) -> f64 {
    if theta >= 0.0 {
        let e = (-theta).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + theta.exp())
    }
}

/// Inverse of [`p1_of_theta`]: `θ = ln((1 - p₁) / p₁)`.
pub fn theta_init_of_p1(p1: f64) -> Result<f64, BiasSimError> {
    if !(p1 > 0.0 && p1 < 1.0) {
        return Err(BiasSimError::ProbabilityOutOfRange(p1));
    }
    Ok(((1.0 - p1) / p1).ln())
}

/// `KL((p₁, 1-p₁) ‖ (½, ½))`.
pub fn kl_to_uniform(p1: f64) -> f64 {
    let p = SimplexVector::new(vec![p1, 1.0 - p1]).expect("p1 in [0, 1]");
    let truth = SimplexVector::new(vec![0.5, 0.5]).expect("uniform");
    simplex::kl_divergence(&p, &truth).expect("uniform has full support")
}

/// One self-training step: draw `n` samples from `p(θ)`, compare their
/// class-1 frequency with `p₁(θ)` and descend.
pub fn categorical_step<R: Rng + ?Sized>(theta: f64, n: usize, eta: f64, rng: &mut R) -> f64 {
    let p1 = p1_of_theta(theta);
    let hits = (0..n).filter(|_| rng.random::<f64>() < p1).count();
    let p1_batch = hits as f64 / n as f64;
    theta - eta * (p1_batch - p1)
}

/// Counter-keyed RNG for one trajectory.
pub fn trajectory_rng(seed: u64, grid_index: usize, traj_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((grid_index as u64) << 32) | (traj_index as u64 & 0xffff_ffff));
    rng
}

pub fn run_trajectory(
    cfg: &CategoricalSimConfig,
    p1_init: f64,
    grid_index: usize,
    traj_index: usize,
) -> Result<TrajectoryResult, BiasSimError> {
    let theta_init = theta_init_of_p1(p1_init)?;
    let mut rng = trajectory_rng(cfg.seed, grid_index, traj_index);
    let mut theta = theta_init;
    for _ in 0..cfg.steps {
        theta = categorical_step(theta, cfg.n, cfg.eta, &mut rng);
    }
    let kl_init = kl_to_uniform(p1_of_theta(theta_init));
    let kl_final = kl_to_uniform(p1_of_theta(theta));
    Ok(TrajectoryResult {
        theta_init,
        theta_final: theta,
        kl_init,
        kl_final,
        amplified: kl_final > kl_init,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmplificationEstimate {
    pub probability: f64,
    /// Binomial standard error `sqrt(p (1 - p) / trajectories)`.
    pub stderr: f64,
    pub amplified: usize,
    pub trajectories: usize,
}

/// Fraction of `cfg.trajectories` runs from `p1_init` that end with a larger
/// KL to the truth than they started with. `grid_index` selects the RNG
/// streams; trajectories run on the current rayon pool.
pub fn amplification_probability(
    cfg: &CategoricalSimConfig,
    p1_init: f64,
    grid_index: usize,
) -> Result<AmplificationEstimate, BiasSimError> {
    cfg.validate()?;
    if cfg.trajectories == 0 {
        return Err(BiasSimError::InvalidConfig("trajectories must be >= 1".into()));
    }
    let flags = (0..cfg.trajectories)
        .into_par_iter()
        .map(|t| run_trajectory(cfg, p1_init, grid_index, t).map(|r| r.amplified))
        .collect::<Result<Vec<_>, _>>()?;
    let amplified = flags.iter().filter(|&&a| a).count();
    let total = cfg.trajectories as f64;
    let p = amplified as f64 / total;
    Ok(AmplificationEstimate {
        probability: p,
        stderr: (p * (1.0 - p) / total).sqrt(),
        amplified,
        trajectories: cfg.trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub p1_init: f64,
    pub n: usize,
    pub trajectories: usize,
    pub steps: usize,
    pub eta: f64,
    pub amplification_prob: f64,
    pub stderr: f64,
}

/// Every grid point × every batch size, rows ordered by grid point then `n`.
pub fn sweep(cfg: &CategoricalSimConfig, n_list: &[usize]) -> Result<Vec<SweepRow>, BiasSimError> {
    let tasks: Vec<(usize, f64, usize)> = cfg
        .p1_init_grid
        .iter()
        .enumerate()
        .flat_map(|(g, &p)| n_list.iter().map(move |&n| (g, p, n)))
        .collect();
    tasks
        .into_par_iter()
        .map(|(g, p1, n)| {
            let c = CategoricalSimConfig { n, ..cfg.clone() };
            let est = amplification_probability(&c, p1, g)?;
            Ok(SweepRow {
                p1_init: p1,
                n,
                trajectories: c.trajectories,
                steps: c.steps,
                eta: c.eta,
                amplification_prob: est.probability,
                stderr: est.stderr,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// 1-D logistic model
// ---------------------------------------------------------------------------

/// Absolute tolerance of every quadrature call.
pub const QUAD_TOL: f64 = 1e-10;
/// Integration windows are truncated where the density drops below this.
pub const TAIL_CUTOFF: f64 = 1e-14;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    #[default]
    StandardNormal,
    /// Equal-weight mixture of `N(mu0, sigma²)` and `N(mu1, sigma²)`.
    TwoComponentMixture { mu0: f64, mu1: f64, sigma: f64 },
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Half-width beyond which `N(mu, sigma²)` has density below `cutoff`.
fn normal_radius(sigma: f64, cutoff: f64) -> f64 {
    let peak = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    if peak <= cutoff {
        return sigma;
    }
    sigma * (2.0 * (peak / cutoff).ln()).sqrt()
}

impl Density {
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Density::StandardNormal => normal_pdf(x, 0.0, 1.0),
            Density::TwoComponentMixture { mu0, mu1, sigma } => {
                0.5 * normal_pdf(x, mu0, sigma) + 0.5 * normal_pdf(x, mu1, sigma)
            }
        }
    }

    /// Interval outside of which the density is below [`TAIL_CUTOFF`].
    pub fn window(&self) -> (f64, f64) {
        match *self {
            Density::StandardNormal => {
                let r = normal_radius(1.0, TAIL_CUTOFF);
                (-r, r)
            }
            Density::TwoComponentMixture { mu0, mu1, sigma } => {
                let r = normal_radius(sigma, TAIL_CUTOFF);
                (mu0.min(mu1) - r, mu0.max(mu1) + r)
            }
        }
    }

    fn validate(&self) -> Result<(), BiasSimError> {
        if let Density::TwoComponentMixture { mu0, mu1, sigma } = *self {
            if !(sigma > 0.0 && sigma.is_finite() && mu0.is_finite() && mu1.is_finite()) {
                return Err(BiasSimError::InvalidConfig(format!(
                    "mixture needs finite means and sigma > 0 (got {mu0}, {mu1}, {sigma})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticSimConfig {
    pub tau: f64,
    pub b_init: f64,
    pub eta: f64,
    pub steps: usize,
    pub w0: f64,
    pub w1: f64,
    pub density: Density,
    /// Re-derive `w0 = w1 · Q1 / Q0` at every step, which zeroes the drift.
    pub balance_weights: bool,
}

impl Default for LogisticSimConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            b_init: 0.5,
            eta: 0.5,
            steps: 200,
            w0: 1.0,
            w1: 1.0,
            density: Density::StandardNormal,
            balance_weights: false,
        }
    }
}

impl LogisticSimConfig {
    pub fn validate(&self) -> Result<(), BiasSimError> {
        logistic_h(self.tau)?;
        if !(self.w0 >= 0.0 && self.w1 >= 0.0) {
            return Err(BiasSimError::InvalidConfig("class weights must be >= 0".into()));
        }
        if !self.eta.is_finite() || !self.b_init.is_finite() {
            return Err(BiasSimError::InvalidConfig("eta and b_init must be finite".into()));
        }
        self.density.validate()
    }
}

/// Margin `h = ln(τ / (1 - τ))` between the decision boundary `x = -b` and
/// the pseudo-label boundaries `x = -b ± h`.
pub fn logistic_h(tau: f64) -> Result<f64, BiasSimError> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(BiasSimError::ThresholdOutOfRange(tau));
    }
    Ok((tau / (1.0 - tau)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QSide {
    /// `∫_{-∞}^{-b-h} p(x) g(x; b) dx`: mass of class-0 pseudo-labels weighted by `g`.
    Q0,
    /// `∫_{-b+h}^{∞} p(x) (1 - g(x; b)) dx`.
    Q1,
}

pub fn logistic_q(b: f64, h: f64, density: &Density, which: QSide) -> Result<f64, BiasSimError> {
    let (lo, hi) = density.window();
    let v = match which {
        QSide::Q0 => quadrature::integrate(
            |x| density.pdf(x) / (1.0 + (-(x + b)).exp()),
            lo,
            hi.min(-b - h),
            QUAD_TOL,
        )?,
        QSide::Q1 => quadrature::integrate(
            |x| density.pdf(x) / (1.0 + (x + b).exp()),
            lo.max(-b + h),
            hi,
            QUAD_TOL,
        )?,
    };
    Ok(v)
}

/// Probability mass pseudo-labelled as class 0 and as class 1.
pub fn pseudo_label_mass(b: f64, h: f64, density: &Density) -> Result<(f64, f64), BiasSimError> {
    let (lo, hi) = density.window();
    let p0 = quadrature::integrate(|x| density.pdf(x), lo, hi.min(-b - h), QUAD_TOL)?;
    let p1 = quadrature::integrate(|x| density.pdf(x), lo.max(-b + h), hi, QUAD_TOL)?;
    Ok((p0, p1))
}

/// Effective `(w0, w1)` at `b` given the config's balancing policy.
fn step_weights(cfg: &LogisticSimConfig, q0: f64, q1: f64) -> (f64, f64) {
    if cfg.balance_weights && q0 > 0.0 {
        (cfg.w1 * q1 / q0, cfg.w1)
    } else {
        (cfg.w0, cfg.w1)
    }
}

/// `b' = b - η (w₀ Q₀(b) - w₁ Q₁(b))`.
pub fn logistic_step(b: f64, cfg: &LogisticSimConfig) -> Result<f64, BiasSimError> {
    let h = logistic_h(cfg.tau)?;
    let q0 = logistic_q(b, h, &cfg.density, QSide::Q0)?;
    let q1 = logistic_q(b, h, &cfg.density, QSide::Q1)?;
    let (w0, w1) = step_weights(cfg, q0, q1);
    Ok(b - cfg.eta * (w0 * q0 - w1 * q1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogisticTraceRow {
    pub step: usize,
    pub b: f64,
    #[serde(rename = "Q0")]
    pub q0: f64,
    #[serde(rename = "Q1")]
    pub q1: f64,
    pub p_yhat0: f64,
    pub p_yhat1: f64,
}

/// Runs `cfg.steps` updates; row `k` describes `b` before update `k + 1`
/// (row `steps` is the final state).
pub fn run_logistic(cfg: &LogisticSimConfig) -> Result<Vec<LogisticTraceRow>, BiasSimError> {
    cfg.validate()?;
    let h = logistic_h(cfg.tau)?;
    let mut b = cfg.b_init;
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let q0 = logistic_q(b, h, &cfg.density, QSide::Q0)?;
        let q1 = logistic_q(b, h, &cfg.density, QSide::Q1)?;
        let (p_yhat0, p_yhat1) = pseudo_label_mass(b, h, &cfg.density)?;
        rows.push(LogisticTraceRow {
            step,
            b,
            q0,
            q1,
            p_yhat0,
            p_yhat1,
        });
        let (w0, w1) = step_weights(cfg, q0, q1);
        b -= cfg.eta * (w0 * q0 - w1 * q1);
    }
    Ok(rows)
}

pub fn write_logistic_csv<W: Write>(rows: &[LogisticTraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
