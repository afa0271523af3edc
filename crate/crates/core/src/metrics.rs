//! Evaluation statistics: error rates, per-class accuracy, pseudo-label
//! utilization, KL-to-truth, seed aggregation and Friedman ranks.

use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::debiaser::PseudoBatch;
use crate::simplex::{self, SimplexError, SimplexVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed table: {0}")]
    MalformedTable(String),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// Fraction of the batch whose mask is set.
pub fn utilization_ratio(pb: &PseudoBatch) -> Result<f64, MetricsError> {
    if pb.batch_size() == 0 {
        return Err(MetricsError::EmptyBatch);
    }
    Ok(pb.accepted() as f64 / pb.batch_size() as f64)
}

/// Accuracy within each true class; `None` for classes absent from `truths`.
pub fn per_class_accuracy(
    preds: &[usize],
    truths: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<f64>>, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &t) in preds.iter().zip(truths) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(MetricsError::LabelOutOfRange { label, num_classes });
            }
        }
        total[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect())
}

/// Test error in percent.
pub fn error_rate(preds: &[usize], truths: &[usize]) -> Result<f64, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * (1.0 - correct as f64 / preds.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    /// Set when only one value was given and `std` is a placeholder 0.
    pub single_sample: bool,
}

pub fn seed_aggregate(values: &[f64]) -> Result<SeedSummary, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(SeedSummary {
            mean,
            std: 0.0,
            single_sample: true,
        });
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(SeedSummary {
        mean,
        std: (ss / (n - 1.0)).sqrt(),
        single_sample: false,
    })
}

/// `KL(p_model ‖ p_truth)` in nats.
pub fn kl_to_truth(p_model: &SimplexVector, p_truth: &SimplexVector) -> Result<f64, MetricsError> {
    Ok(simplex::kl_divergence(p_model, p_truth)?)
}

/// Error rates (percent) of `methods` on `tasks`, row-major by method.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub methods: Vec<String>,
    pub tasks: Vec<String>,
    pub error: Vec<Vec<f64>>,
}

impl ErrorTable {
    pub fn new(methods: Vec<String>, tasks: Vec<String>, error: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let t = Self { methods, tasks, error };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::MalformedTable(m));
        if self.methods.is_empty() || self.tasks.is_empty() {
            return bad("table needs at least one method and one task".into());
        }
        if self.error.len() != self.methods.len() {
            return bad(format!(
                "{} rows for {} methods",
                self.error.len(),
                self.methods.len()
            ));
        }
        for (m, row) in self.methods.iter().zip(&self.error) {
            if row.len() != self.tasks.len() {
                return bad(format!("method {m}: {} cells, expected {}", row.len(), self.tasks.len()));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return bad(format!("method {m}: error {v} outside [0, 100]"));
            }
        }
        Ok(())
    }

    /// Parses a delimited table: header `method,task1,task2,...`, then one
    /// row per method with its name in the first column.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let malformed = |e: csv::Error| MetricsError::MalformedTable(e.to_string());
        let header = rdr.headers().map_err(malformed)?.clone();
        if header.len() < 2 || header.get(0) != Some("method") {
            return Err(MetricsError::MalformedTable(
                "header must be `method` followed by at least one task".into(),
            ));
        }
        let tasks: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        if tasks.iter().any(|t| t.is_empty()) {
            return Err(MetricsError::MalformedTable("empty task name in header".into()));
        }
        let mut methods = Vec::new();
        let mut error = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(malformed)?;
            let name = rec.get(0).unwrap_or_default();
            if name.is_empty() {
                return Err(MetricsError::MalformedTable("empty method name".into()));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    cell.parse::<f64>().map_err(|_| {
                        MetricsError::MalformedTable(format!("method {name}: bad cell {cell:?}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            methods.push(name.to_owned());
            error.push(row);
        }
        Self::new(methods, tasks, error)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["method".to_owned()];
        header.extend(self.tasks.iter().cloned());
        w.write_record(&header)?;
        for (m, row) in self.methods.iter().zip(&self.error) {
            let mut rec = vec![m.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRank {
    pub method: String,
    pub mean_rank: f64,
    pub mean_error: f64,
}

/// Ranks within one task, ascending by error, ties sharing the average of
/// the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Mean Friedman rank and mean error of every method, in table order.
pub fn friedman_rank(t: &ErrorTable) -> Result<Vec<MethodRank>, MetricsError> {
    t.validate()?;
    if t.methods.len() < 2 {
        return Err(MetricsError::MalformedTable("need at least two methods".into()));
    }
    let m = t.methods.len();
    let n_tasks = t.tasks.len();
    let mut rank_sum = vec![0.0; m];
    for task in 0..n_tasks {
        let column: Vec<f64> = t.error.iter().map(|row| row[task]).collect();
        for (s, r) in rank_sum.iter_mut().zip(average_ranks(&column)) {
            *s += r;
        }
    }
    Ok(t.methods
        .iter()
        .zip(&t.error)
        .zip(rank_sum)
        .map(|((name, row), s)| MethodRank {
            method: name.clone(),
            mean_rank: s / n_tasks as f64,
            mean_error: row.iter().sum::<f64>() / n_tasks as f64,
        })
        .collect())
}
