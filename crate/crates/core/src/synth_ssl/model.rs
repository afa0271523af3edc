//! Softmax classifiers with hand-written backprop: a linear head, or one
//! tanh hidden layer followed by a linear head.
//!
//! Parameters live in one flat buffer so gradients, SGD and finite-difference
//! checks can treat them as a plain vector. Layout:
//!
//! ```text
//! linear:  [ W_out (C×D) | b_out (C) ]
//! mlp(H):  [ W_hid (H×D) | b_hid (H) | W_out (C×H) | b_out (C) ]
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::simplex::SimplexVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    kind: ModelKind,
    num_classes: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Activations {
    pub hidden: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(kind: ModelKind, num_classes: usize, dim: usize) -> Self {
        let len = match kind {
            ModelKind::Linear => num_classes * dim + num_classes,
            ModelKind::Mlp { hidden } => hidden * dim + hidden + num_classes * hidden + num_classes,
        };
        Self {
            kind,
            num_classes,
            dim,
            data: vec![0.0; len],
        }
    }

    /// Zero output layer; hidden weights `~ N(0, 1/D)` so units differ.
    pub fn init<R: Rng + ?Sized>(kind: ModelKind, num_classes: usize, dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(kind, num_classes, dim);
        if let ModelKind::Mlp { hidden } = kind {
            let scale = 1.0 / (dim as f64).sqrt();
            for w in &mut p.data[..hidden * dim] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.num_classes, self.dim)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Width of the layer feeding the output head.
    fn head_inputs(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.dim,
            ModelKind::Mlp { hidden } => hidden,
        }
    }

    fn head_offset(&self) -> usize {
        match self.kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp { hidden } => hidden * self.dim + hidden,
        }
    }

    pub fn activations(&self, x: &[f64]) -> Activations {
        debug_assert_eq!(x.len(), self.dim);
        let hidden = match self.kind {
            ModelKind::Linear => None,
            ModelKind::Mlp { hidden } => {
                let (w, rest) = self.data.split_at(hidden * self.dim);
                let b = &rest[..hidden];
                Some(
                    (0..hidden)
                        .map(|j| {
                            let row = &w[j * self.dim..(j + 1) * self.dim];
                            let z = row.iter().zip(x).fold(b[j], |acc, (a, v)| acc + a * v);
                            z.tanh()
                        })
                        .collect::<Vec<_>>(),
                )
            }
        };
        let input = hidden.as_deref().unwrap_or(x);
        let k = self.head_inputs();
        let off = self.head_offset();
        let w = &self.data[off..off + self.num_classes * k];
        let b = &self.data[off + self.num_classes * k..];
        let logits = (0..self.num_classes)
            .map(|c| {
                let row = &w[c * k..(c + 1) * k];
                row.iter().zip(input).fold(b[c], |acc, (a, v)| acc + a * v)
            })
            .collect();
        Activations { hidden, logits }
    }

    pub fn forward(&self, x: &[f64]) -> Result<SimplexVector, SynthError> {
        softmax(&self.activations(x).logits)
    }

    /// Adds `scale · ∂(-ln p_target)/∂θ` at input `x` into `grad`, given the
    /// forward pass `act` and its softmax `probs`.
    pub fn accumulate_ce_grad(
        &self,
        x: &[f64],
        act: &Activations,
        probs: &SimplexVector,
        target: usize,
        scale: f64,
        grad: &mut ClassifierParams,
    ) {
        let c_n = self.num_classes;
        let dlogits: Vec<f64> = (0..c_n)
            .map(|c| {
                let onehot = if c == target { 1.0 } else { 0.0 };
                scale * (probs[c] - onehot)
            })
            .collect();

        let input = act.hidden.as_deref().unwrap_or(x);
        let k = self.head_inputs();
        let off = self.head_offset();
        {
            let g = &mut grad.data[off..];
            for c in 0..c_n {
                for j in 0..k {
                    g[c * k + j] += dlogits[c] * input[j];
                }
                g[c_n * k + c] += dlogits[c];
            }
        }

        if let (ModelKind::Mlp { hidden }, Some(a)) = (self.kind, act.hidden.as_ref()) {
            let w_out = &self.data[off..off + c_n * k];
            let d = self.dim;
            for j in 0..hidden {
                let mut da = 0.0;
                for c in 0..c_n {
                    da += dlogits[c] * w_out[c * k + j];
                }
                let dz = da * (1.0 - a[j] * a[j]);
                for i in 0..d {
                    grad.data[j * d + i] += dz * x[i];
                }
                grad.data[hidden * d + j] += dz;
            }
        }
    }

    /// `θ ← θ - lr · g`
    pub fn sgd_step(&mut self, grad: &ClassifierParams, lr: f64) {
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= lr * g;
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Result<SimplexVector, SynthError> {
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(SynthError::NonFiniteLogit(*v));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum = exps.iter().fold(0.0, |a, b| a + b);
    Ok(SimplexVector::new(exps.into_iter().map(|e| e / sum).collect())?)
}
