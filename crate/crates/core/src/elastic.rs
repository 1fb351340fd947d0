//! Early exits: placement schedules, the weighted multi-exit loss and
//! budgeted anytime prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchitectureDescriptor, DescriptorError, ExitHeadSpec, ExitSpec};
use crate::flops::FlopsTable;
use crate::graph::{Graph, GraphError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ElasticError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("target is not a one-hot vector")]
    DegenerateTarget,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("first active exit {first_active} outside 1..={num_exits}")]
    OutOfRange { first_active: usize, num_exits: usize },
    #[error("placement {index} exceeds the backbone's {blocks} blocks")]
    UnknownBlock { index: usize, blocks: usize },
    #[error("invalid exit schedule: {0}")]
    InvalidSchedule(String),
    #[error("budget too small: the first active exit needs {minimum} MACs")]
    BudgetTooSmall { minimum: u64 },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Exit placements (1-based block indices) with their loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSchedule {
    placements: Vec<usize>,
    weights: Vec<f64>,
}

impl ExitSchedule {
    pub fn new(placements: Vec<usize>, weights: Vec<f64>) -> Result<Self, ElasticError> {
        if placements.len() != weights.len() {
            return Err(ElasticError::LengthMismatch {
                expected: placements.len(),
                got: weights.len(),
            });
        }
        if placements.is_empty() {
            return Err(ElasticError::InvalidSchedule("no exits".into()));
        }
        if placements.first() == Some(&0) || placements.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ElasticError::InvalidSchedule(
                "placements must be 1-based and strictly increasing".into(),
            ));
        }
        if weights.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(ElasticError::InvalidSchedule(
                "weights must be finite and non-negative".into(),
            ));
        }
        if !weights.iter().any(|a| *a > 0.0) {
            return Err(ElasticError::InvalidSchedule(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(Self { placements, weights })
    }

    /// A single exit on block `block` with weight 1: the plain network.
    pub fn single(block: usize) -> Result<Self, ElasticError> {
        Self::new(vec![block], vec![1.0])
    }

    pub fn from_descriptor(desc: &ArchitectureDescriptor) -> Result<Self, ElasticError> {
        let exits = desc.effective_exits();
        Self::new(
            exits.iter().map(|e| e.block).collect(),
            exits.iter().map(|e| e.alpha).collect(),
        )
    }

    pub fn placements(&self) -> &[usize] {
        &self.placements
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    /// 1-based index of the first exit with positive weight.
    pub fn first_active(&self) -> usize {
        self.weights.iter().position(|a| *a > 0.0).expect("validated") + 1
    }

    /// Same placements with new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, ElasticError> {
        Self::new(self.placements.clone(), weights)
    }
}

/// Weights 0 below `first_active` and 1 from it on, with exits on blocks
/// `1..=num_exits`.
pub fn midpoint_schedule(num_exits: usize, first_active: usize) -> Result<ExitSchedule, ElasticError> {
    if num_exits == 0 || first_active == 0 || first_active > num_exits {
        return Err(ElasticError::OutOfRange {
            first_active,
            num_exits,
        });
    }
    let weights = (1..=num_exits)
        .map(|p| if p < first_active { 0.0 } else { 1.0 })
        .collect();
    ExitSchedule::new((1..=num_exits).collect(), weights)
}

/// Attaches one exit head per placement to `backbone`, replacing any exits
/// it already declares. Backbone layers are left untouched.
pub fn elastify(
    backbone: &ArchitectureDescriptor,
    schedule: &ExitSchedule,
    head: &ExitHeadSpec,
) -> Result<ArchitectureDescriptor, ElasticError> {
    let blocks = backbone.blocks.len();
    if let Some(&index) = schedule.placements.iter().find(|&&p| p > blocks) {
        return Err(ElasticError::UnknownBlock { index, blocks });
    }
    let mut out = backbone.clone();
    out.num_classes = head.classes;
    out.exits = schedule
        .placements
        .iter()
        .zip(&schedule.weights)
        .map(|(&block, &alpha)| ExitSpec { block, alpha })
        .collect();
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitLoss {
    pub per_exit: Vec<f64>,
    pub total: f64,
}

/// Cross-entropy `-ln p` with `p` floored at the smallest positive normal so
/// a confident wrong answer gives a large finite loss. NaN stays NaN.
fn cross_entropy(p: f64) -> f64 {
    if p.is_nan() {
        return f64::NAN;
    }
    -p.max(f64::MIN_POSITIVE).ln()
}

/// Per-exit categorical cross-entropy of one sample and their weighted sum.
pub fn multi_exit_loss(outputs: &[Tensor], target: &Tensor, weights: &[f64]) -> Result<MultiExitLoss, ElasticError> {
    if outputs.len() != weights.len() {
        return Err(ElasticError::LengthMismatch {
            expected: outputs.len(),
            got: weights.len(),
        });
    }
    let t = target.data();
    let hot = t.iter().filter(|v| **v == 1.0).count();
    if hot != 1 || t.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(ElasticError::DegenerateTarget);
    }
    let label = Tensor::argmax(t);
    let mut per_exit = Vec::with_capacity(outputs.len());
    for o in outputs {
        if o.len() != t.len() {
            return Err(ElasticError::LengthMismatch {
                expected: t.len(),
                got: o.len(),
            });
        }
        per_exit.push(cross_entropy(o.data()[label]));
    }
    let total = per_exit.iter().zip(weights).map(|(l, a)| l * a).sum();
    Ok(MultiExitLoss { per_exit, total })
}

/// Batch-mean multi-exit loss for integer labels, together with the gradient
/// of the total with respect to each exit's pre-softmax logits,
/// `alpha_p * (y_p - t) / n`. Outputs are `[n, classes]`.
pub fn batch_loss_and_logit_grads(
    outputs: &[Tensor],
    labels: &[usize],
    weights: &[f64],
) -> Result<(MultiExitLoss, Vec<Tensor>), ElasticError> {
    if outputs.len() != weights.len() {
        return Err(ElasticError::LengthMismatch {
            expected: outputs.len(),
            got: weights.len(),
        });
    }
    let n = labels.len();
    let mut per_exit = Vec::with_capacity(outputs.len());
    let mut grads = Vec::with_capacity(outputs.len());
    for (o, &alpha) in outputs.iter().zip(weights) {
        if o.rank() != 2 || o.shape()[0] != n {
            return Err(ElasticError::LengthMismatch {
                expected: n,
                got: o.shape()[0],
            });
        }
        let classes = o.shape()[1];
        let mut loss = 0.0;
        let mut g = o.clone();
        for (s, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(ElasticError::LabelOutOfRange { label, classes });
            }
            loss += cross_entropy(o.sample(s)[label]);
            g.data_mut()[s * classes + label] -= 1.0;
        }
        g.scale(alpha / n as f64);
        per_exit.push(loss / n as f64);
        grads.push(g);
    }
    let total = per_exit.iter().zip(weights).map(|(l, a)| l * a).sum();
    Ok((MultiExitLoss { per_exit, total }, grads))
}

/// 0-based index of the deepest active exit whose cumulative cost fits the
/// budget. Exits with zero weight are never chosen.
pub fn select_exit(table: &FlopsTable, weights: &[f64], budget: f64) -> Result<usize, ElasticError> {
    if weights.len() != table.cumulative_at_exit.len() {
        return Err(ElasticError::LengthMismatch {
            expected: table.cumulative_at_exit.len(),
            got: weights.len(),
        });
    }
    let active = || {
        table
            .cumulative_at_exit
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|(_, (_, a))| **a > 0.0)
    };
    active()
        .filter(|(_, (e, _))| e.cumulative_macs as f64 <= budget)
        .map(|(i, _)| i)
        .next_back()
        .ok_or_else(|| ElasticError::BudgetTooSmall {
            minimum: active().map(|(_, (e, _))| e.cumulative_macs).next().unwrap_or(0),
        })
}

/// Prediction of the deepest affordable exit. Layers past that exit are not
/// evaluated. Returns the 1-based exit index and its probabilities.
pub fn anytime_predict(
    g: &Graph,
    x: &Tensor,
    budget: f64,
    table: &FlopsTable,
) -> Result<(usize, Tensor), ElasticError> {
    let weights: Vec<f64> = g.exits().iter().map(|e| e.alpha).collect();
    let exit = select_exit(table, &weights, budget)?;
    let (probs, _) = g.forward_to_exit(x, exit)?;
    Ok((exit + 1, probs))
}
