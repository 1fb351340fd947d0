//! Age-estimation metrics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MetricsError {
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Csv(e) if e.is_io_error())
    }
}

/// Expected age `sum_k k * p_k` of a probability vector over ages `0..len`.
pub fn decode_age(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Annotated apparent age: annotator mean and standard deviation, plus the
/// ground truth used for MAE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub mu: f64,
    pub sigma: f64,
    pub true_age: f64,
}

impl AnnotatedSample {
    pub fn new(mu: f64, sigma: f64, true_age: f64) -> Result<Self, MetricsError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(MetricsError::InvalidSample(format!("sigma must be >= 0, got {sigma}")));
        }
        if !(0.0..=100.0).contains(&mu) {
            return Err(MetricsError::InvalidSample(format!(
                "mu must lie in [0, 100], got {mu}"
            )));
        }
        Ok(Self { mu, sigma, true_age })
    }
}

/// `1 - exp(-(y - mu)^2 / (2 sigma^2))`. With `sigma == 0` this takes its
/// limit: 0 for an exact match, 1 otherwise.
pub fn epsilon_error(pred: f64, sample: &AnnotatedSample) -> f64 {
    let d = pred - sample.mu;
    if sample.sigma == 0.0 {
        return if d == 0.0 { 0.0 } else { 1.0 };
    }
    -(-d * d / (2.0 * sample.sigma * sample.sigma)).exp_m1()
}

pub fn epsilon_error_mean(preds: &[f64], samples: &[AnnotatedSample]) -> Result<f64, MetricsError> {
    if preds.len() != samples.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), samples.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(preds
        .iter()
        .zip(samples)
        .map(|(p, s)| epsilon_error(*p, s))
        .sum::<f64>()
        / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pred_age: f64,
    pub true_age: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub mae: f64,
    pub eps: f64,
    /// Rows scored with the zero-sigma limit.
    pub zero_sigma: usize,
    pub count: usize,
}

/// Reads `pred_age,true_age,mu,sigma` rows (with that header).
pub fn read_eval_csv(input: impl Read) -> Result<Vec<EvalRow>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    reader.deserialize().map(|r| r.map_err(MetricsError::from)).collect()
}

pub fn write_eval_csv(rows: &[EvalRow], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn evaluate(rows: &[EvalRow]) -> Result<EvalSummary, MetricsError> {
    let samples = rows
        .iter()
        .map(|r| AnnotatedSample::new(r.mu, r.sigma, r.true_age))
        .collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<f64> = rows.iter().map(|r| r.pred_age).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.true_age).collect();
    Ok(EvalSummary {
        mae: mae(&preds, &truth)?,
        eps: epsilon_error_mean(&preds, &samples)?,
        zero_sigma: samples.iter().filter(|s| s.sigma == 0.0).count(),
        count: rows.len(),
    })
}
