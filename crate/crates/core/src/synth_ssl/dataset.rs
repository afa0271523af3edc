//! Gaussian-mixture datasets with optional geometric long-tail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::simplex::{self, SimplexVector};

pub type Features = Vec<f64>;

/// Per-class counts `max(1, round(N1 · γ^(-(i-1)/(C-1))))` for `i = 1..=C`,
/// rounding half up.
pub fn longtail_counts(n1: usize, gamma: f64, num_classes: usize) -> Result<Vec<usize>, SynthError> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(SynthError::InvalidGamma(gamma));
    }
    if n1 == 0 {
        return Err(SynthError::DegenerateSpec("head-class count must be >= 1".into()));
    }
    if num_classes < 2 {
        return Err(SynthError::DegenerateSpec(format!(
            "num_classes = {num_classes} < 2"
        )));
    }
    let denom = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|i| {
            if i == 0 {
                return n1;
            }
            let raw = n1 as f64 * gamma.powf(-(i as f64) / denom);
            ((raw + 0.5).floor() as usize).max(1)
        })
        .collect())
}

/// `C` class means evenly spaced on a circle of `radius` in the first two
/// coordinates (remaining coordinates zero).
pub fn circle_means(num_classes: usize, dim: usize, radius: f64) -> Vec<Features> {
    (0..num_classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            let mut m = vec![0.0; dim];
            if dim >= 1 {
                m[0] = radius * angle.cos();
            }
            if dim >= 2 {
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub means: Vec<Features>,
    pub sigma_class: f64,
    pub n_labeled_head: usize,
    pub n_unlabeled_head: usize,
    pub gamma: f64,
    pub n_test_per_class: usize,
    pub seed: u64,
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::DegenerateSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} < 2", self.num_classes));
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.means.len() != self.num_classes {
            return bad(format!(
                "{} means for {} classes",
                self.means.len(),
                self.num_classes
            ));
        }
        for (c, m) in self.means.iter().enumerate() {
            if m.len() != self.dim {
                return bad(format!("mean {c} has dimension {} != {}", m.len(), self.dim));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return bad(format!("mean {c} is not finite"));
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.means[a] == self.means[b] {
                    return bad(format!("classes {a} and {b} share a mean"));
                }
            }
        }
        if !(self.sigma_class >= 0.0 && self.sigma_class.is_finite()) {
            return bad(format!("sigma_class = {}", self.sigma_class));
        }
        if self.n_test_per_class == 0 {
            return bad("n_test_per_class must be >= 1".into());
        }
        longtail_counts(self.n_labeled_head, self.gamma, self.num_classes)?;
        longtail_counts(self.n_unlabeled_head.max(1), self.gamma, self.num_classes)?;
        Ok(())
    }

    pub fn labeled_counts(&self) -> Result<Vec<usize>, SynthError> {
        longtail_counts(self.n_labeled_head, self.gamma, self.num_classes)
    }

    pub fn unlabeled_counts(&self) -> Result<Vec<usize>, SynthError> {
        if self.n_unlabeled_head == 0 {
            return Ok(vec![0; self.num_classes]);
        }
        longtail_counts(self.n_unlabeled_head, self.gamma, self.num_classes)
    }
}

/// Ground-truth labels of the unlabeled pool. Only evaluation code reads
/// them, through [`HiddenLabels::reveal`].
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn reveal(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Vec<Features>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub x: Vec<Features>,
    truth: HiddenLabels,
}

impl UnlabeledSet {
    pub fn truth(&self) -> &HiddenLabels {
        &self.truth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub num_classes: usize,
    pub dim: usize,
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
    /// Empirical class marginal over labeled + unlabeled instances.
    pub p_truth: SimplexVector,
}

fn sample_class(
    mean: &[f64],
    sigma: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Features>,
) {
    for _ in 0..count {
        out.push(
            mean.iter()
                .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
    }
}

fn sample_split(
    spec: &SynthDatasetSpec,
    counts: &[usize],
    stream: u64,
) -> (Vec<Features>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (c, (&n, mean)) in counts.iter().zip(&spec.means).enumerate() {
        sample_class(mean, spec.sigma_class, n, &mut rng, &mut x);
        y.extend(std::iter::repeat_n(c, n));
    }
    (x, y)
}

/// Samples `x ~ N(mean_y, σ² I)` for the labeled, unlabeled and (balanced)
/// test splits, each from its own stream of `spec.seed`.
pub fn generate_dataset(spec: &SynthDatasetSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let n_l = spec.labeled_counts()?;
    let n_u = spec.unlabeled_counts()?;
    let n_t = vec![spec.n_test_per_class; spec.num_classes];

    let (lx, ly) = sample_split(spec, &n_l, 0);
    let (ux, uy) = sample_split(spec, &n_u, 1);
    let (tx, ty) = sample_split(spec, &n_t, 2);

    let totals: Vec<f64> = n_l.iter().zip(&n_u).map(|(a, b)| (a + b) as f64).collect();
    let p_truth = simplex::normalize(&totals)?;

    Ok(SynthDataset {
        num_classes: spec.num_classes,
        dim: spec.dim,
        labeled: LabeledSet { x: lx, y: ly },
        unlabeled: UnlabeledSet {
            x: ux,
            truth: HiddenLabels(uy),
        },
        test: LabeledSet { x: tx, y: ty },
        p_truth,
    })
}

/// Additive isotropic Gaussian noise `x + N(0, σ² I)`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Features {
    x.iter()
        .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
