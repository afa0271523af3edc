//! Probability-vector arithmetic over a finite set of classes.
//!
//! Every distribution that flows through the pipeline (per-instance
//! predictions, the EMA-tracked model marginal, the target marginal and the
//! ground-truth marginal) is a [`SimplexVector`]. Construction validates the
//! simplex invariants; nothing is silently renormalized.
//!
//! All sums run left to right over the class index so results are
//! reproducible bit for bit. Logarithms are natural, so divergences and
//! entropies are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on `|Σ p - 1|` accepted when building a [`SimplexVector`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Floor substituted for positive subnormal entries inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimplexError {
    #[error("vector sums to zero and cannot be normalized")]
    AllZeroVector,
    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entry {index} is not finite ({value})")]
    NonFiniteEntry { index: usize, value: f64 },
    #[error("entries sum to {sum}, outside tolerance of 1")]
    NotNormalized { sum: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("p[{index}] > 0 but q[{index}] = 0; divergence is infinite")]
    UnsupportedSupport { index: usize },
    #[error("momentum {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("class count {0} is below 2")]
    InvalidClassCount(usize),
    #[error("vector is empty")]
    EmptyVector,
    #[error("entry {index} is not strictly positive ({value})")]
    NonPositiveEntry { index: usize, value: f64 },
}

/// A probability distribution over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates `probs` as-is: entries finite and nonnegative, sum within
    /// [`SIMPLEX_TOLERANCE`] of one.
    pub fn new(probs: Vec<f64>) -> Result<Self, SimplexError> {
        check_entries(&probs)?;
        let sum = left_sum(&probs);
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(SimplexError::NotNormalized { sum });
        }
        Ok(Self(probs))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Largest probability (the confidence of the argmax class).
    pub fn max_prob(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        // Nonempty by construction.
        argmax_deterministic(&self.0).unwrap_or(0)
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = SimplexError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Self {
        v.0
    }
}

/// Strictly positive, finite per-class ratios (scaling factors, weights).
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveVector(Vec<f64>);

impl PositiveVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SimplexError> {
        if values.is_empty() {
            return Err(SimplexError::EmptyVector);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(SimplexError::NonFiniteEntry { index, value });
            }
            if value <= 0.0 {
                return Err(SimplexError::NonPositiveEntry { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Multiplies every entry by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self, SimplexError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl std::ops::Index<usize> for PositiveVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_entries(v: &[f64]) -> Result<(), SimplexError> {
    if v.len() < 2 {
        return Err(SimplexError::InvalidClassCount(v.len()));
    }
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() {
            return Err(SimplexError::NonFiniteEntry { index, value });
        }
        if value < 0.0 {
            return Err(SimplexError::NegativeEntry { index, value });
        }
    }
    Ok(())
}

fn left_sum(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc + x)
}

/// Natural log of a positive probability; subnormals are floored to [`LOG_FLOOR`].
fn ln_prob(x: f64) -> f64 {
    if x < f64::MIN_POSITIVE {
        LOG_FLOOR.ln()
    } else {
        x.ln()
    }
}

/// Divides a nonnegative vector by its sum.
pub fn normalize(v: &[f64]) -> Result<SimplexVector, SimplexError> {
    check_entries(v)?;
    let sum = left_sum(v);
    if sum <= 0.0 {
        return Err(SimplexError::AllZeroVector);
    }
    if !sum.is_finite() {
        return Err(SimplexError::NonFiniteEntry {
            index: v.len(),
            value: sum,
        });
    }
    // Already normalized up to summation rounding: return as-is so that
    // normalize(normalize(v)) == normalize(v) bit for bit.
    if (sum - 1.0).abs() <= v.len() as f64 * f64::EPSILON {
        return Ok(SimplexVector(v.to_vec()));
    }
    Ok(SimplexVector(v.iter().map(|x| x / sum).collect()))
}

/// `KL(p ‖ q) = Σ p ln(p / q)` in nats, with `0 ln(0 / q) = 0`.
pub fn kl_divergence(p: &SimplexVector, q: &SimplexVector) -> Result<f64, SimplexError> {
    if p.dim() != q.dim() {
        return Err(SimplexError::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    let mut acc = 0.0;
    for (index, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(SimplexError::UnsupportedSupport { index });
        }
        acc += pi * (ln_prob(pi) - ln_prob(qi));
    }
    Ok(acc.max(0.0))
}

/// Shannon entropy `-Σ p ln p` in nats.
pub fn entropy(p: &SimplexVector) -> f64 {
    let mut acc = 0.0;
    for &pi in &p.0 {
        if pi > 0.0 {
            acc -= pi * ln_prob(pi);
        }
    }
    acc.max(0.0)
}

/// `λ·prev + (1-λ)·obs`. At `λ = 1` the result is `prev` bit for bit and at
/// `λ = 0` it is `obs`.
pub fn ema_update(
    prev: &SimplexVector,
    obs: &SimplexVector,
    lambda: f64,
) -> Result<SimplexVector, SimplexError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SimplexError::LambdaOutOfRange(lambda));
    }
    if prev.dim() != obs.dim() {
        return Err(SimplexError::DimensionMismatch {
            left: prev.dim(),
            right: obs.dim(),
        });
    }
    if lambda == 1.0 {
        return Ok(prev.clone());
    }
    if lambda == 0.0 {
        return Ok(obs.clone());
    }
    let out = prev
        .0
        .iter()
        .zip(&obs.0)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(SimplexVector(out))
}

/// Elementwise mean of a batch of distributions.
pub fn mean(batch: &[SimplexVector]) -> Result<SimplexVector, SimplexError> {
    let first = batch.first().ok_or(SimplexError::EmptyVector)?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for p in batch {
        if p.dim() != dim {
            return Err(SimplexError::DimensionMismatch {
                left: dim,
                right: p.dim(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(&p.0) {
            *a += x;
        }
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(SimplexVector(acc))
}

pub fn uniform(num_classes: usize) -> Result<SimplexVector, SimplexError> {
    if num_classes < 2 {
        return Err(SimplexError::InvalidClassCount(num_classes));
    }
    Ok(SimplexVector(vec![1.0 / num_classes as f64; num_classes]))
}

/// Index of the largest entry; exact ties resolve to the lowest index.
pub fn argmax_deterministic(v: &[f64]) -> Result<usize, SimplexError> {
    let mut best = *v.first().ok_or(SimplexError::EmptyVector)?;
    let mut idx = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best {
            best = x;
            idx = i;
        }
    }
    Ok(idx)
}
