//! Debiased pseudo-label generation and utilization.
//!
//! A [`DebiaserState`] tracks two class marginals: `p_model`, an EMA of the
//! model's averaged weak-view predictions, and `p_target`, the distribution
//! the pseudo-labels are steered towards. Their ratio `r = p_target / p_model`
//! is used twice per step:
//!
//! 1. *generation*: weak-view predictions are rescaled by `r` and
//!    renormalized before the argmax label and the confidence mask are taken;
//! 2. *utilization*: each accepted instance is weighted by `r` of its
//!    pseudo-label, clipped to an adaptive interval whose width grows with
//!    `KL(p_model ‖ p_target)`.
//!
//! The per-step order is fixed: [`DebiaserState::update_model_dist`], then
//! [`DebiaserState::update_target_dist`], then [`DebiaserState::generate`],
//! then the loss. With every toggle off the pipeline reduces to plain
//! fixed-threshold pseudo-labelling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simplex::{self, PositiveVector, SimplexError, SimplexVector};

/// Smallest `p_model` entry / entropy accepted before the state is
/// considered collapsed.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Cap applied to weights when reweighting runs without clipping.
pub const UNCLIPPED_WEIGHT_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DebiaserError {
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error("p_model[{class}] = {value} is degenerate")]
    DegenerateModelDistribution { class: usize, value: f64 },
    #[error("entropy of p_model ({0}) is degenerate")]
    DegenerateEntropy(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid debiaser config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Lower end of the adaptive weight interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLowerMode {
    /// `[1, r_max]`
    #[default]
    PaperOne,
    /// `[1 / r_max, r_max]`, so strong classes can be down-weighted.
    SymmetricReciprocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebiaserConfig {
    pub num_classes: usize,
    /// Confidence threshold; the mask requires `max(q) > tau`.
    pub tau: f64,
    pub lambda_model: f64,
    pub lambda_target: f64,
    pub enable_rescale: bool,
    pub enable_reweight: bool,
    pub enable_clipping: bool,
    pub enable_target_update: bool,
    #[serde(default)]
    pub weight_lower_mode: WeightLowerMode,
}

impl DebiaserConfig {
    /// Defaults for class-balanced data: the target stays uniform.
    pub fn balanced(num_classes: usize) -> Self {
        Self {
            num_classes,
            tau: 0.95,
            lambda_model: 0.999,
            lambda_target: 1.0,
            enable_rescale: true,
            enable_reweight: true,
            enable_clipping: true,
            enable_target_update: true,
            weight_lower_mode: WeightLowerMode::PaperOne,
        }
    }

    /// Defaults for long-tailed data: the target slowly follows `p_model`.
    pub fn imbalanced(num_classes: usize) -> Self {
        Self {
            lambda_target: 0.99999,
            ..Self::balanced(num_classes)
        }
    }

    /// Every debiasing feature off: fixed-threshold pseudo-labelling.
    pub fn baseline(num_classes: usize) -> Self {
        Self {
            enable_rescale: false,
            enable_reweight: false,
            enable_clipping: false,
            enable_target_update: false,
            ..Self::balanced(num_classes)
        }
    }

    pub fn validate(&self) -> Result<(), DebiaserError> {
        let bad = |msg: String| Err(DebiaserError::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} < 2", self.num_classes));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau = {} not in (0, 1)", self.tau));
        }
        for (name, v) in [
            ("lambda_model", self.lambda_model),
            ("lambda_target", self.lambda_target),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} not in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn is_baseline(&self) -> bool {
        !(self.enable_rescale
            || self.enable_reweight
            || self.enable_clipping
            || self.enable_target_update)
    }
}

/// Hard pseudo-labels for one unlabeled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBatch {
    pub labels: Vec<usize>,
    pub masks: Vec<bool>,
    pub weights: Vec<f64>,
}

impl PseudoBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn accepted(&self) -> usize {
        self.masks.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiaserState {
    pub step: u64,
    pub p_model: SimplexVector,
    pub p_target: SimplexVector,
    pub config: DebiaserConfig,
}

impl DebiaserState {
    /// Fresh state with both marginals uniform.
    pub fn new(config: DebiaserConfig) -> Result<Self, DebiaserError> {
        config.validate()?;
        let u = simplex::uniform(config.num_classes)?;
        Ok(Self {
            step: 0,
            p_model: u.clone(),
            p_target: u,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// `r[c] = p_target[c] / p_model[c]`.
    pub fn scaling_factor(&self) -> Result<PositiveVector, DebiaserError> {
        let mut r = Vec::with_capacity(self.num_classes());
        for (class, (&t, &m)) in self
            .p_target
            .as_slice()
            .iter()
            .zip(self.p_model.as_slice())
            .enumerate()
        {
            if m <= DEGENERACY_EPS {
                return Err(DebiaserError::DegenerateModelDistribution { class, value: m });
            }
            r.push(t / m);
        }
        Ok(PositiveVector::new(r)?)
    }

    /// `(r_min, r_max)` with `r_max = 1 + KL(p_model ‖ p_target) · C / H(p_model)`.
    pub fn adaptive_bound(&self) -> Result<(f64, f64), DebiaserError> {
        let h = simplex::entropy(&self.p_model);
        if h <= DEGENERACY_EPS {
            return Err(DebiaserError::DegenerateEntropy(h));
        }
        let kl = simplex::kl_divergence(&self.p_model, &self.p_target)?;
        let r_max = 1.0 + kl / (h / self.num_classes() as f64);
        let r_min = match self.config.weight_lower_mode {
            WeightLowerMode::PaperOne => 1.0,
            WeightLowerMode::SymmetricReciprocal => 1.0 / r_max,
        };
        Ok((r_min, r_max))
    }

    /// Pseudo-labels, masks and weights for a batch of weak-view predictions.
    /// Reads the state only.
    pub fn generate(&self, batch_p_w: &[SimplexVector]) -> Result<PseudoBatch, DebiaserError> {
        if batch_p_w.is_empty() {
            return Err(DebiaserError::EmptyBatch);
        }
        let cfg = &self.config;
        for p in batch_p_w {
            if p.dim() != cfg.num_classes {
                return Err(DebiaserError::DimensionMismatch {
                    expected: cfg.num_classes,
                    got: p.dim(),
                });
            }
        }

        let r = if cfg.enable_rescale || cfg.enable_reweight {
            Some(self.scaling_factor()?)
        } else {
            None
        };
        let bound = if cfg.enable_reweight && cfg.enable_clipping {
            Some(self.adaptive_bound()?)
        } else {
            None
        };

        let n = batch_p_w.len();
        let mut pb = PseudoBatch {
            labels: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        };
        let mut capped = 0usize;
        for p_w in batch_p_w {
            let rescaled;
            let q = match (&r, cfg.enable_rescale) {
                (Some(r), true) => {
                    rescaled = rescale(p_w, r)?;
                    &rescaled
                }
                _ => p_w,
            };
            let label = q.argmax();
            let mask = q.max_prob() > cfg.tau;
            let weight = match (&r, cfg.enable_reweight) {
                (Some(r), true) => match bound {
                    Some((lo, hi)) => r[label].clamp(lo, hi),
                    None if r[label] > UNCLIPPED_WEIGHT_CAP => {
                        capped += 1;
                        UNCLIPPED_WEIGHT_CAP
                    }
                    None => r[label],
                },
                _ => 1.0,
            };
            pb.labels.push(label);
            pb.masks.push(mask);
            pb.weights.push(weight);
        }
        if capped > 0 {
            log::warn!(
                "step {}: {capped} unclipped weight(s) capped at {UNCLIPPED_WEIGHT_CAP}",
                self.step
            );
        }
        Ok(pb)
    }

    /// EMA of `p_model` towards the mean of the raw (un-rescaled) predictions.
    pub fn update_model_dist(&mut self, batch_p_w: &[SimplexVector]) -> Result<(), DebiaserError> {
        if batch_p_w.is_empty() {
            return Err(DebiaserError::EmptyBatch);
        }
        let avg = simplex::mean(batch_p_w)?;
        self.p_model = simplex::ema_update(&self.p_model, &avg, self.config.lambda_model)?;
        Ok(())
    }

    /// EMA of `p_target` towards the current `p_model`; no-op when disabled.
    pub fn update_target_dist(&mut self) -> Result<(), DebiaserError> {
        if !self.config.enable_target_update {
            return Ok(());
        }
        self.p_target =
            simplex::ema_update(&self.p_target, &self.p_model, self.config.lambda_target)?;
        Ok(())
    }

    /// Serializes the snapshot (step, marginals, config) as JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state is always serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let state: Self = serde_json::from_str(s)?;
        if state.p_model.dim() != state.config.num_classes
            || state.p_target.dim() != state.config.num_classes
        {
            return Err(serde::de::Error::custom("marginal dimension != num_classes"));
        }
        Ok(state)
    }
}

/// `normalize(p_w ⊙ r)`.
pub fn rescale(p_w: &SimplexVector, r: &PositiveVector) -> Result<SimplexVector, DebiaserError> {
    if p_w.dim() != r.dim() {
        return Err(DebiaserError::DimensionMismatch {
            expected: p_w.dim(),
            got: r.dim(),
        });
    }
    let prod: Vec<f64> = p_w
        .as_slice()
        .iter()
        .zip(r.as_slice())
        .map(|(p, s)| p * s)
        .collect();
    Ok(simplex::normalize(&prod)?)
}

/// `(1/|B|) Σ w_i · m_i · (-ln p_s[i][y_i])`, averaged over the full batch.
pub fn weighted_masked_ce(p_s: &[SimplexVector], pb: &PseudoBatch) -> Result<f64, DebiaserError> {
    let n = pb.batch_size();
    if p_s.len() != n || pb.masks.len() != n || pb.weights.len() != n {
        return Err(DebiaserError::DimensionMismatch {
            expected: n,
            got: p_s.len(),
        });
    }
    if n == 0 {
        return Err(DebiaserError::EmptyBatch);
    }
    let mut acc = 0.0;
    for ((p, &label), (&mask, &w)) in p_s
        .iter()
        .zip(&pb.labels)
        .zip(pb.masks.iter().zip(&pb.weights))
    {
        if !mask {
            continue;
        }
        acc += w * -p[label].ln();
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> SimplexVector {
        SimplexVector::new(v.to_vec()).unwrap()
    }

    fn state_with(cfg: DebiaserConfig, model: &[f64], target: &[f64]) -> DebiaserState {
        let mut s = DebiaserState::new(cfg).unwrap();
        s.p_model = sv(model);
        s.p_target = sv(target);
        s
    }

    #[test]
    fn scaling_factor_examples() {
        let cfg = DebiaserConfig::balanced(2);
        let s = state_with(cfg.clone(), &[0.3, 0.7], &[0.3, 0.7]);
        assert_eq!(s.scaling_factor().unwrap().as_slice(), &[1.0, 1.0]);

        let s = state_with(cfg.clone(), &[0.75, 0.25], &[0.5, 0.5]);
        let r = s.scaling_factor().unwrap();
        assert!((r[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r[1] - 2.0).abs() < 1e-15);

        let s = state_with(cfg.clone(), &[0.5, 0.5], &[0.1, 0.9]);
        let r = s.scaling_factor().unwrap();
        assert!((r[0] - 0.2).abs() < 1e-15);
        assert!((r[1] - 1.8).abs() < 1e-15);

        let s = state_with(cfg, &[1.0, 0.0], &[0.5, 0.5]);
        assert!(matches!(
            s.scaling_factor(),
            Err(DebiaserError::DegenerateModelDistribution { class: 1, .. })
        ));
    }

    #[test]
    fn rescale_examples() {
        let r = PositiveVector::new(vec![2.0 / 3.0, 2.0]).unwrap();
        let q = rescale(&sv(&[0.6, 0.4]), &r).unwrap();
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q[1] - 2.0 / 3.0).abs() < 1e-15);

        let p = sv(&[0.1, 0.2, 0.7]);
        assert_eq!(rescale(&p, &PositiveVector::ones(3)).unwrap(), p);

        let r = PositiveVector::new(vec![0.01, 500.0]).unwrap();
        assert_eq!(rescale(&sv(&[1.0, 0.0]), &r).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn generate_threshold_is_strict() {
        let mut cfg = DebiaserConfig::baseline(2);
        cfg.tau = 0.95;
        let s = DebiaserState::new(cfg).unwrap();
        let pb = s
            .generate(&[sv(&[0.97, 0.03]), sv(&[0.90, 0.10]), sv(&[0.95, 0.05])])
            .unwrap();
        assert_eq!(pb.labels, vec![0, 0, 0]);
        assert_eq!(pb.masks, vec![true, false, false]);
        assert_eq!(pb.weights, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_state_gives_unit_weights() {
        let s = DebiaserState::new(DebiaserConfig::balanced(3)).unwrap();
        let pb = s
            .generate(&[sv(&[0.98, 0.01, 0.01]), sv(&[0.2, 0.3, 0.5])])
            .unwrap();
        assert_eq!(pb.weights, vec![1.0, 1.0]);
        assert_eq!(pb.labels, vec![0, 2]);
    }

    #[test]
    fn generate_rescales_before_thresholding() {
        // p_model over-predicts class 0, so an instance confident in class 0
        // falls below the threshold after rescaling.
        let s = state_with(DebiaserConfig::balanced(2), &[0.75, 0.25], &[0.5, 0.5]);
        let pb = s.generate(&[sv(&[0.96, 0.04])]).unwrap();
        // 0.96·2/3 = 0.64, 0.04·2 = 0.08 → 0.64/0.72 ≈ 0.889
        assert_eq!(pb.labels, vec![0]);
        assert_eq!(pb.masks, vec![false]);
        // r[0] = 2/3 clipped to r_min = 1.
        assert_eq!(pb.weights, vec![1.0]);
    }

    #[test]
    fn adaptive_bound_examples() {
        let cfg = DebiaserConfig::balanced(2);
        let s = state_with(cfg.clone(), &[0.3, 0.7], &[0.3, 0.7]);
        assert_eq!(s.adaptive_bound().unwrap(), (1.0, 1.0));

        let s = state_with(cfg.clone(), &[0.8, 0.2], &[0.5, 0.5]);
        let kl = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let h = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        let oracle = 1.0 + kl / (h / 2.0);
        let (lo, hi) = s.adaptive_bound().unwrap();
        assert_eq!(lo, 1.0);
        assert!((hi - oracle).abs() < 1e-14);
        assert!((hi - 1.7703).abs() < 1e-4);

        let mut sym = cfg.clone();
        sym.weight_lower_mode = WeightLowerMode::SymmetricReciprocal;
        let s = state_with(sym, &[0.8, 0.2], &[0.5, 0.5]);
        let (lo, hi2) = s.adaptive_bound().unwrap();
        assert_eq!(hi2, hi);
        assert!((lo - 1.0 / oracle).abs() < 1e-14);
        assert!((lo - 0.5649).abs() < 1e-4);

        let s = state_with(cfg, &[1.0, 0.0], &[0.5, 0.5]);
        assert!(matches!(s.adaptive_bound(), Err(DebiaserError::DegenerateEntropy(_))));
    }

    #[test]
    fn adaptive_bound_is_continuous_at_target() {
        let cfg = DebiaserConfig::balanced(3);
        let target = [0.2, 0.3, 0.5];
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let eps = 0.1f64.powi(k);
            let model = [0.2 + eps, 0.3, 0.5 - eps];
            let (_, hi) = state_with(cfg.clone(), &model, &target).adaptive_bound().unwrap();
            assert!(hi >= 1.0 && hi - 1.0 <= prev);
            prev = hi - 1.0;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn model_update_examples() {
        let mut cfg = DebiaserConfig::balanced(2);
        let batch = [sv(&[0.9, 0.1]), sv(&[0.5, 0.5])];

        cfg.lambda_model = 1.0;
        let mut s = DebiaserState::new(cfg.clone()).unwrap();
        s.update_model_dist(&batch).unwrap();
        assert_eq!(s.p_model.as_slice(), &[0.5, 0.5]);

        cfg.lambda_model = 0.999;
        let mut s = DebiaserState::new(cfg.clone()).unwrap();
        s.update_model_dist(&batch).unwrap();
        // 0.999·0.5 + 0.001·0.7
        assert!((s.p_model[0] - 0.5002).abs() < 1e-15);
        assert!((s.p_model[1] - 0.4998).abs() < 1e-15);
        assert_eq!(s.step, 0);

        cfg.lambda_model = 0.0;
        let mut s = DebiaserState::new(cfg).unwrap();
        s.update_model_dist(&[sv(&[0.3, 0.7])]).unwrap();
        assert_eq!(s.p_model.as_slice(), &[0.3, 0.7]);
        assert_eq!(s.update_model_dist(&[]), Err(DebiaserError::EmptyBatch));
    }

    #[test]
    fn target_update_examples() {
        let mut cfg = DebiaserConfig::balanced(2);
        let mut s = state_with(cfg.clone(), &[0.6, 0.4], &[0.5, 0.5]);
        s.update_target_dist().unwrap();
        assert_eq!(s.p_target.as_slice(), &[0.5, 0.5]);

        cfg.lambda_target = 0.0;
        let mut s = state_with(cfg.clone(), &[0.6, 0.4], &[0.5, 0.5]);
        s.update_target_dist().unwrap();
        assert_eq!(s.p_target.as_slice(), &[0.6, 0.4]);

        cfg.lambda_target = 0.99999;
        let mut s = state_with(cfg.clone(), &[0.6, 0.4], &[0.5, 0.5]);
        s.update_target_dist().unwrap();
        assert!((s.p_target[0] - 0.500001).abs() < 1e-15);
        assert!((s.p_target[1] - 0.499999).abs() < 1e-15);

        cfg.lambda_target = 0.0;
        cfg.enable_target_update = false;
        let mut s = state_with(cfg, &[0.6, 0.4], &[0.5, 0.5]);
        s.update_target_dist().unwrap();
        assert_eq!(s.p_target.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn weighted_ce_examples() {
        let pb = PseudoBatch {
            labels: vec![0, 1],
            masks: vec![false, false],
            weights: vec![1.0, 1.0],
        };
        let ps = [sv(&[0.5, 0.5]), sv(&[0.2, 0.8])];
        assert_eq!(weighted_masked_ce(&ps, &pb).unwrap(), 0.0);

        let one = PseudoBatch {
            labels: vec![0],
            masks: vec![true],
            weights: vec![1.0],
        };
        let l = weighted_masked_ce(&ps[..1], &one).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let half = PseudoBatch {
            labels: vec![0, 1],
            masks: vec![false, true],
            weights: vec![1.0, 1.5],
        };
        let l = weighted_masked_ce(&ps, &half).unwrap();
        assert!((l - 1.5 * -(0.8f64.ln()) / 2.0).abs() < 1e-15);

        assert!(matches!(
            weighted_masked_ce(&ps[..1], &half),
            Err(DebiaserError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_weight_matches_two_copies() {
        let ps = sv(&[0.3, 0.7]);
        let doubled = PseudoBatch {
            labels: vec![1, 0],
            masks: vec![true, false],
            weights: vec![2.0, 1.0],
        };
        let copies = PseudoBatch {
            labels: vec![1, 1],
            masks: vec![true, true],
            weights: vec![1.0, 1.0],
        };
        let a = weighted_masked_ce(&[ps.clone(), ps.clone()], &doubled).unwrap();
        let b = weighted_masked_ce(&[ps.clone(), ps], &copies).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn unclipped_weights_are_capped() {
        let mut cfg = DebiaserConfig::balanced(2);
        cfg.enable_clipping = false;
        let s = state_with(cfg, &[1.0 - 1e-9, 1e-9], &[0.5, 0.5]);
        let pb = s.generate(&[sv(&[0.01, 0.99])]).unwrap();
        assert_eq!(pb.weights, vec![UNCLIPPED_WEIGHT_CAP]);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = state_with(DebiaserConfig::imbalanced(3), &[0.5, 0.3, 0.2], &[0.4, 0.4, 0.2]);
        s.step = 17;
        let back = DebiaserState::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let bad = s.to_json().replace("0.2", "0.3");
        assert!(DebiaserState::from_json(&bad).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DebiaserConfig::balanced(4);
        c.tau = 1.0;
        assert!(c.validate().is_err());
        let mut c = DebiaserConfig::balanced(4);
        c.lambda_model = -0.1;
        assert!(c.validate().is_err());
        assert!(DebiaserConfig::balanced(1).validate().is_err());
        assert!(DebiaserConfig::baseline(4).is_baseline());
    }

    fn dist(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..1.0, c)
    }

    fn norm(v: &[f64]) -> SimplexVector {
        simplex::normalize(v).unwrap()
    }

    proptest! {
        #[test]
        fn rescale_stays_on_simplex(
            (p, r) in (2usize..=100).prop_flat_map(|c| (dist(c), prop::collection::vec(1e-3f64..1e3, c)))
        ) {
            let q = rescale(&norm(&p), &PositiveVector::new(r).unwrap()).unwrap();
            prop_assert!(SimplexVector::new(q.into_vec()).is_ok());
        }

        #[test]
        fn labels_masks_invariant_under_r_scaling(
            (p, r) in (2usize..=12).prop_flat_map(|c| (dist(c), prop::collection::vec(1e-2f64..1e2, c))),
            k in 1e-3f64..1e3,
        ) {
            let p = norm(&p);
            let r = PositiveVector::new(r).unwrap();
            let a = rescale(&p, &r).unwrap();
            let b = rescale(&p, &r.scaled(k).unwrap()).unwrap();
            prop_assert_eq!(a.argmax(), b.argmax());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn strong_classes_lose_odds(
            (p, model, target) in (2usize..=8).prop_flat_map(|c| (dist(c), dist(c), dist(c))),
        ) {
            let cfg = DebiaserConfig::balanced(p.len());
            let s = state_with(cfg, norm(&model).as_slice(), norm(&target).as_slice());
            let pw = norm(&p);
            let r = s.scaling_factor().unwrap();
            let q = rescale(&pw, &r).unwrap();
            for a in 0..pw.dim() {
                for b in 0..pw.dim() {
                    let bias_a = s.p_model[a] / s.p_target[a];
                    let bias_b = s.p_model[b] / s.p_target[b];
                    if bias_a > bias_b * (1.0 + 1e-9) {
                        prop_assert!(q[a] / q[b] < pw[a] / pw[b]);
                    }
                }
            }
        }

        #[test]
        fn weak_class_weight_dominates(
            (model, target) in (2usize..=8).prop_flat_map(|c| (dist(c), dist(c))),
            symmetric in any::<bool>(),
            clip in any::<bool>(),
        ) {
            let mut cfg = DebiaserConfig::balanced(model.len());
            cfg.enable_clipping = clip;
            if symmetric {
                cfg.weight_lower_mode = WeightLowerMode::SymmetricReciprocal;
            }
            let s = state_with(cfg, norm(&model).as_slice(), norm(&target).as_slice());
            let c = model.len();
            // One near-certain instance per class so every label is produced.
            let batch: Vec<_> = (0..c)
                .map(|k| {
                    let mut v = vec![1e-9; c];
                    v[k] = 1.0;
                    norm(&v)
                })
                .collect();
            let pb = s.generate(&batch).unwrap();
            for i in 0..c {
                for j in 0..c {
                    let (a, b) = (pb.labels[i], pb.labels[j]);
                    let strong_a = s.p_model[a] > s.p_target[a];
                    let weak_b = s.p_model[b] < s.p_target[b];
                    if strong_a && weak_b {
                        prop_assert!(pb.weights[j] >= pb.weights[i]);
                    }
                }
            }
        }

        #[test]
        fn generate_is_pure(p in dist(5), model in dist(5)) {
            let s = state_with(DebiaserConfig::balanced(5), norm(&model).as_slice(), &[0.2; 5]);
            let batch = vec![norm(&p); 3];
            let before = s.clone();
            prop_assert_eq!(s.generate(&batch).unwrap(), s.generate(&batch).unwrap());
            prop_assert_eq!(s, before);
        }
    }

    #[test]
    fn all_toggles_off_matches_fixed_threshold() {
        let mut s = DebiaserState::new(DebiaserConfig::baseline(3)).unwrap();
        // A skewed p_model must not influence the baseline.
        s.p_model = sv(&[0.9, 0.05, 0.05]);
        let batch = [sv(&[0.96, 0.02, 0.02]), sv(&[0.03, 0.01, 0.96]), sv(&[0.2, 0.5, 0.3])];
        let pb = s.generate(&batch).unwrap();
        for (p, ((&l, &m), &w)) in batch
            .iter()
            .zip(pb.labels.iter().zip(&pb.masks).zip(&pb.weights))
        {
            assert_eq!(l, p.argmax());
            assert_eq!(m, p.max_prob() > 0.95);
            assert_eq!(w, 1.0);
        }
    }
}
