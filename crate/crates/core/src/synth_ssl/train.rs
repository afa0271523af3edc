//! Combined labeled + unlabeled training loop.
//!
//! One step:
//!
//! 1. sample a labeled and an unlabeled batch and draw their weak/strong views;
//! 2. predict the weak unlabeled views and fold their mean into `p_model`,
//!    then move `p_target`;
//! 3. generate pseudo-labels from the weak predictions, evaluate
//!    `L = L^l + L^u` on the labeled weak views and unlabeled strong views,
//!    and backprop with the pseudo-labels held constant;
//! 4. take an SGD step at the scheduled learning rate.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{augment, Features, LabeledSet, SynthDataset, SynthDatasetSpec};
use super::model::{softmax, ClassifierParams, ModelKind};
use super::SynthError;
use crate::debiaser::{self, DebiaserConfig, DebiaserState, PseudoBatch};
use crate::metrics;
use crate::simplex::SimplexVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub steps: usize,
    pub warmup: usize,
    pub lr: f64,
    pub batch_l: usize,
    pub batch_u: usize,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub debiaser: DebiaserConfig,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
}

impl TrainConfig {
    /// Defaults tied to a dataset: augmentation noise at 0.1σ / 0.5σ and the
    /// debiaser's balanced or long-tail preset.
    pub fn for_dataset(spec: &SynthDatasetSpec) -> Self {
        let debiaser = if spec.gamma > 1.0 {
            DebiaserConfig::imbalanced(spec.num_classes)
        } else {
            DebiaserConfig::balanced(spec.num_classes)
        };
        Self {
            model: ModelKind::Linear,
            steps: 3000,
            warmup: 0,
            lr: 0.05,
            batch_l: 64,
            batch_u: 128,
            sigma_weak: 0.1 * spec.sigma_class,
            sigma_strong: 0.5 * spec.sigma_class,
            debiaser,
            seeds: vec![0, 1, 2],
            eval_every: 50,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        self.debiaser.validate()?;
        if self.batch_u == 0 {
            return bad("batch_u must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr = {}", self.lr));
        }
        if !(self.sigma_weak >= 0.0 && self.sigma_strong >= 0.0) {
            return bad("augmentation scales must be >= 0".into());
        }
        let both_zero = self.sigma_weak == 0.0 && self.sigma_strong == 0.0;
        if !both_zero && self.sigma_weak >= self.sigma_strong {
            return bad(format!(
                "sigma_weak ({}) must be below sigma_strong ({})",
                self.sigma_weak, self.sigma_strong
            ));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return bad("mlp needs at least one hidden unit".into());
        }
        Ok(())
    }
}

/// `η₀ cos(7πk / (16K))`, with a linear ramp from 0 over the first
/// `warmup` steps.
pub fn lr_schedule(lr0: f64, k: usize, total: usize, warmup: usize) -> f64 {
    if k < warmup {
        return lr0 * k as f64 / warmup as f64;
    }
    if total == 0 {
        return lr0;
    }
    lr0 * (7.0 * std::f64::consts::PI * k as f64 / (16.0 * total as f64)).cos()
}

/// What the optimizer is allowed to see: labeled pairs and bare unlabeled
/// features.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub labeled: &'a LabeledSet,
    pub unlabeled: &'a [Features],
}

impl SynthDataset {
    pub fn training_view(&self) -> TrainingData<'_> {
        TrainingData {
            labeled: &self.labeled,
            unlabeled: &self.unlabeled.x,
        }
    }
}

/// Augmented views for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub labeled_weak: Vec<Features>,
    pub labels: Vec<usize>,
    pub unlabeled_weak: Vec<Features>,
    pub unlabeled_strong: Vec<Features>,
}

/// Draws batch indices with replacement, then augments. RNG consumption
/// order: labeled indices, labeled weak views, unlabeled indices, then
/// weak/strong view pairs per unlabeled instance.
pub fn sample_batch<R: Rng + ?Sized>(
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<AugmentedBatch, SynthError> {
    if cfg.batch_l > 0 && data.labeled.is_empty() {
        return Err(SynthError::InvalidConfig("labeled set is empty".into()));
    }
    if data.unlabeled.is_empty() {
        return Err(SynthError::InvalidConfig("unlabeled set is empty".into()));
    }
    let li: Vec<usize> = (0..cfg.batch_l)
        .map(|_| rng.random_range(0..data.labeled.len()))
        .collect();
    let labeled_weak = li
        .iter()
        .map(|&i| augment(&data.labeled.x[i], cfg.sigma_weak, rng))
        .collect();
    let labels = li.iter().map(|&i| data.labeled.y[i]).collect();

    let ui: Vec<usize> = (0..cfg.batch_u)
        .map(|_| rng.random_range(0..data.unlabeled.len()))
        .collect();
    let mut unlabeled_weak = Vec::with_capacity(ui.len());
    let mut unlabeled_strong = Vec::with_capacity(ui.len());
    for &i in &ui {
        let x = &data.unlabeled[i];
        unlabeled_weak.push(augment(x, cfg.sigma_weak, rng));
        unlabeled_strong.push(augment(x, cfg.sigma_strong, rng));
    }
    Ok(AugmentedBatch {
        labeled_weak,
        labels,
        unlabeled_weak,
        unlabeled_strong,
    })
}

pub fn weak_predictions(
    params: &ClassifierParams,
    batch: &AugmentedBatch,
) -> Result<Vec<SimplexVector>, SynthError> {
    batch.unlabeled_weak.iter().map(|x| params.forward(x)).collect()
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub loss_l: f64,
    pub loss_u: f64,
    pub grads: ClassifierParams,
    pub pb: PseudoBatch,
    pub batch_p_w: Vec<SimplexVector>,
}

/// Loss and gradient of `L^l + L^u` for fixed pseudo-labels.
pub fn objective_grad(
    params: &ClassifierParams,
    batch: &AugmentedBatch,
    pb: &PseudoBatch,
) -> Result<(f64, f64, ClassifierParams), SynthError> {
    let mut grads = params.zeros_like();

    let n_l = batch.labeled_weak.len();
    let mut loss_l = 0.0;
    if n_l > 0 {
        let scale = 1.0 / n_l as f64;
        for (x, &y) in batch.labeled_weak.iter().zip(&batch.labels) {
            let act = params.activations(x);
            let p = softmax(&act.logits)?;
            loss_l += -p[y].ln();
            params.accumulate_ce_grad(x, &act, &p, y, scale, &mut grads);
        }
        loss_l /= n_l as f64;
    }

    let n_u = batch.unlabeled_strong.len();
    let mut p_s = Vec::with_capacity(n_u);
    for (i, x) in batch.unlabeled_strong.iter().enumerate() {
        let act = params.activations(x);
        let p = softmax(&act.logits)?;
        if pb.masks[i] {
            let scale = pb.weights[i] / n_u as f64;
            params.accumulate_ce_grad(x, &act, &p, pb.labels[i], scale, &mut grads);
        }
        p_s.push(p);
    }
    let loss_u = debiaser::weighted_masked_ce(&p_s, pb)?;
    Ok((loss_l, loss_u, grads))
}

/// Pseudo-labels from the weak views under `state`, then the objective and
/// its gradient with those labels treated as constants.
pub fn loss_and_grad(
    params: &ClassifierParams,
    batch: &AugmentedBatch,
    state: &DebiaserState,
) -> Result<StepOutput, SynthError> {
    let batch_p_w = weak_predictions(params, batch)?;
    let pb = state.generate(&batch_p_w)?;
    let (loss_l, loss_u, grads) = objective_grad(params, batch, &pb)?;
    Ok(StepOutput {
        loss: loss_l + loss_u,
        loss_l,
        loss_u,
        grads,
        pb,
        batch_p_w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    /// Means over the steps since the previous row (NaN on the step-0 row).
    pub loss_l: f64,
    pub loss_u: f64,
    pub util_ratio: f64,
    pub kl_model_truth: f64,
    pub kl_target_truth: f64,
    pub test_error: f64,
    pub acc_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsHistory {
    pub num_classes: usize,
    pub rows: Vec<MetricsRow>,
}

fn fmt_f64(v: f64) -> String {
    v.to_string()
}

impl MetricsHistory {
    pub fn header(num_classes: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "step",
            "lr",
            "loss_l",
            "loss_u",
            "util_ratio",
            "kl_model_truth",
            "kl_target_truth",
            "test_error",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..num_classes).map(|c| format!("acc_class_{c}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(Self::header(self.num_classes))?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.loss_l),
                fmt_f64(r.loss_u),
                fmt_f64(r.util_ratio),
                fmt_f64(r.kl_model_truth),
                fmt_f64(r.kl_target_truth),
                fmt_f64(r.test_error),
            ];
            rec.extend(
                r.acc_class
                    .iter()
                    .map(|a| a.map(fmt_f64).unwrap_or_else(|| "NA".into())),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Equality on the bit patterns of every field, NaN included.
    pub fn bit_identical(&self, other: &Self) -> bool {
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.num_classes == other.num_classes
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.step == b.step
                    && same(a.lr, b.lr)
                    && same(a.loss_l, b.loss_l)
                    && same(a.loss_u, b.loss_u)
                    && same(a.util_ratio, b.util_ratio)
                    && same(a.kl_model_truth, b.kl_model_truth)
                    && same(a.kl_target_truth, b.kl_target_truth)
                    && same(a.test_error, b.test_error)
                    && a.acc_class.len() == b.acc_class.len()
                    && a.acc_class.iter().zip(&b.acc_class).all(|(x, y)| match (x, y) {
                        (Some(x), Some(y)) => same(*x, *y),
                        (None, None) => true,
                        _ => false,
                    })
            })
    }

    /// Mean of `kl_model_truth` over rows after step 0.
    pub fn time_averaged_kl_model(&self) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step > 0)
            .map(|r| r.kl_model_truth)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn final_test_error(&self) -> f64 {
        self.rows.last().map(|r| r.test_error).unwrap_or(f64::NAN)
    }

    /// Mean utilization over rows whose step lies in the last `fraction` of
    /// `total_steps`.
    pub fn mean_util_tail(&self, total_steps: usize, fraction: f64) -> f64 {
        let start = total_steps as f64 * (1.0 - fraction);
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step > 0 && r.step as f64 > start)
            .map(|r| r.util_ratio)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Test-set metrics for the current parameters and marginals.
pub fn evaluate(
    params: &ClassifierParams,
    state: &DebiaserState,
    data: &SynthDataset,
) -> Result<(f64, Vec<Option<f64>>, f64, f64), SynthError> {
    let preds = data
        .test
        .x
        .iter()
        .map(|x| params.forward(x).map(|p| p.argmax()))
        .collect::<Result<Vec<_>, _>>()?;
    let err = metrics::error_rate(&preds, &data.test.y).map_err(metric_err)?;
    let acc = metrics::per_class_accuracy(&preds, &data.test.y, data.num_classes)
        .map_err(metric_err)?;
    let kl_m = metrics::kl_to_truth(&state.p_model, &data.p_truth).map_err(metric_err)?;
    let kl_t = metrics::kl_to_truth(&state.p_target, &data.p_truth).map_err(metric_err)?;
    Ok((err, acc, kl_m, kl_t))
}

fn metric_err(e: metrics::MetricsError) -> SynthError {
    SynthError::InvalidConfig(format!("evaluation failed: {e}"))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, history: MetricsHistory },
}

/// RNG driving one training run: stream 0 for batches, stream 1 for init.
pub fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let batch = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(1);
    (batch, init)
}

/// Interval accumulator for the logged loss/utilization means.
#[derive(Default)]
struct Running {
    loss_l: f64,
    loss_u: f64,
    util: f64,
    n: usize,
}

impl Running {
    fn take(&mut self) -> (f64, f64, f64) {
        let n = self.n as f64;
        let out = if self.n == 0 {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (self.loss_l / n, self.loss_u / n, self.util / n)
        };
        *self = Running::default();
        out
    }
}

/// Runs `cfg.steps` SGD steps from a fresh model and debiaser state,
/// logging a row at step 0, every `eval_every` steps and at the end.
pub fn train(cfg: &TrainConfig, data: &SynthDataset, seed: u64) -> Result<MetricsHistory, TrainError> {
    cfg.validate()?;
    if cfg.debiaser.num_classes != data.num_classes {
        return Err(SynthError::InvalidConfig(format!(
            "debiaser has {} classes, dataset {}",
            cfg.debiaser.num_classes, data.num_classes
        ))
        .into());
    }
    let (mut rng, mut init_rng) = run_rngs(seed);
    let mut params = ClassifierParams::init(cfg.model, data.num_classes, data.dim, &mut init_rng);
    let mut state = DebiaserState::new(cfg.debiaser.clone()).map_err(SynthError::from)?;
    let view = data.training_view();

    let mut history = MetricsHistory {
        num_classes: data.num_classes,
        rows: Vec::new(),
    };
    let mut running = Running::default();
    let record = |step: usize,
                      lr: f64,
                      running: &mut Running,
                      params: &ClassifierParams,
                      state: &DebiaserState,
                      history: &mut MetricsHistory|
     -> Result<(), SynthError> {
        let (loss_l, loss_u, util_ratio) = running.take();
        let (test_error, acc_class, kl_model_truth, kl_target_truth) = evaluate(params, state, data)?;
        history.rows.push(MetricsRow {
            step,
            lr,
            loss_l,
            loss_u,
            util_ratio,
            kl_model_truth,
            kl_target_truth,
            test_error,
            acc_class,
        });
        Ok(())
    };

    record(0, lr_schedule(cfg.lr, 0, cfg.steps, cfg.warmup), &mut running, &params, &state, &mut history)?;

    for k in 0..cfg.steps {
        let batch = sample_batch(view, cfg, &mut rng)?;
        let out = match step_objective(&params, &batch, &mut state) {
            Ok(out) if out.loss.is_finite() => out,
            Ok(_) | Err(SynthError::NonFiniteLogit(_)) => {
                return Err(TrainError::Diverged { step: k + 1, history });
            }
            Err(e) => return Err(e.into()),
        };
        let lr = lr_schedule(cfg.lr, k, cfg.steps, cfg.warmup);
        params.sgd_step(&out.grads, lr);
        if !params.is_finite() {
            return Err(TrainError::Diverged { step: k + 1, history });
        }
        state.step += 1;

        running.loss_l += out.loss_l;
        running.loss_u += out.loss_u;
        running.util += metrics::utilization_ratio(&out.pb).map_err(metric_err)?;
        running.n += 1;

        let step = k + 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            match record(step, lr, &mut running, &params, &state, &mut history) {
                Err(SynthError::NonFiniteLogit(_)) => return Err(TrainError::Diverged { step, history }),
                r => r?,
            }
        }
    }
    Ok(history)
}

/// Marginal updates followed by the objective, in step order.
fn step_objective(
    params: &ClassifierParams,
    batch: &AugmentedBatch,
    state: &mut DebiaserState,
) -> Result<StepOutput, SynthError> {
    let p_w = weak_predictions(params, batch)?;
    state.update_model_dist(&p_w)?;
    state.update_target_dist()?;
    loss_and_grad(params, batch, state)
}
