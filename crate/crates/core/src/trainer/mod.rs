//! Two-phase SGD training: exit heads first with the trunk frozen, then the
//! whole network under a plateau learning-rate schedule.

pub mod data;

use std::fmt::Write as _;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elastic::{batch_loss_and_logit_grads, ElasticError, ExitSchedule};
use crate::graph::{Graph, GraphError, ParamRef, Role};
use crate::tensor::Tensor;
pub use data::{synthetic_shapes, Dataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("graph has {graph} exits but the schedule has {schedule}")]
    ScheduleMismatch { graph: usize, schedule: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}: per-exit losses {per_exit:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        per_exit: Vec<f64>,
    },
    #[error("dataset is empty")]
    EmptyData,
    #[error("bad dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Elastic(#[from] ElasticError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn is_io(&self) -> bool {
        match self {
            Self::Io(_) => true,
            Self::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

fn d_batch() -> usize {
    32
}
fn d_momentum() -> f64 {
    0.9
}
fn d_phase1_epochs() -> usize {
    10
}
fn d_phase1_lr() -> f64 {
    1e-3
}
fn d_phase2_lr() -> f64 {
    1e-2
}
fn d_decay() -> f64 {
    10.0
}
fn d_lr_min() -> f64 {
    1e-5
}
fn d_patience() -> usize {
    5
}
fn d_threshold() -> f64 {
    1e-3
}
fn d_max_epochs() -> usize {
    150
}
fn d_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_phase1_epochs")]
    pub phase1_epochs: usize,
    #[serde(default = "d_phase1_lr")]
    pub phase1_lr: f64,
    #[serde(default = "d_phase2_lr")]
    pub phase2_lr_init: f64,
    #[serde(default = "d_decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default = "d_patience")]
    pub plateau_patience: usize,
    /// Relative improvement below which the validation loss counts as flat.
    #[serde(default = "d_threshold")]
    pub plateau_threshold: f64,
    /// Total epochs over both phases.
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Mirror each training sample left to right with probability 1/2.
    #[serde(default)]
    pub flip_augment: bool,
    /// Multiplier on the Glorot bound used for exit-head weights.
    #[serde(default = "d_init_scale")]
    pub output_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let rates = [
            ("phase1_lr", self.phase1_lr),
            ("phase2_lr_init", self.phase2_lr_init),
            ("lr_min", self.lr_min),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_min > self.phase2_lr_init || self.lr_min > self.phase1_lr {
            return Err(TrainError::Config("lr_min exceeds an initial learning rate".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 1.0 {
            return Err(TrainError::Config("lr_decay_factor must exceed 1".into()));
        }
        if self.phase1_epochs > self.max_epochs {
            return Err(TrainError::Config("phase1_epochs exceeds max_epochs".into()));
        }
        Ok(())
    }
}

/// Classic momentum: `v <- m v - lr g`, `theta <- theta + v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(TrainError::ShapeMismatch(format!(
            "param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Learning rate after observing `history`, the validation losses since the
/// last change. Decays by `lr_decay_factor` (floored at `lr_min`) when none
/// of the last `plateau_patience` epochs beat the earlier best by more than
/// `plateau_threshold` relative.
pub fn plateau_scheduler(history: &[f64], current_lr: f64, config: &TrainConfig) -> f64 {
    let patience = config.plateau_patience;
    if history.len() <= patience {
        return current_lr;
    }
    let split = history.len() - patience;
    let best_before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let best_recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    if best_recent < best_before - config.plateau_threshold * best_before.abs() {
        current_lr
    } else {
        (current_lr / config.lr_decay_factor).max(config.lr_min)
    }
}

/// Glorot-uniform weights `U(-r, r)`, `r = scale * sqrt(6 / (fan_in + fan_out))`,
/// and zero biases for every exit-head layer. Trunk parameters are untouched.
pub fn init_output_layers(graph: &mut Graph, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in graph.param_refs() {
        if !matches!(graph.role(p), Role::Head { .. }) {
            continue;
        }
        let (fan_in, fan_out) = graph.nodes()[p.node].op.fans().expect("parameterised op");
        let t = graph.param_mut(p);
        if p.index == 0 {
            let r = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-r..r);
            }
        } else {
            t.data_mut().fill(0.0);
        }
    }
}

/// He-uniform trunk and Glorot-uniform heads from one seed.
pub fn initialize(graph: &mut Graph, seed: u64, output_scale: f64) {
    graph.init_params(seed);
    init_output_layers(graph, seed.wrapping_add(0x9e37_79b9_7f4a_7c15), output_scale);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitStats {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Weighted multi-exit loss.
    pub total: f64,
}

/// Mean per-exit cross-entropy and accuracy over a dataset.
pub fn evaluate_exits(graph: &Graph, data: &Dataset, batch_size: usize) -> Result<ExitStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let weights: Vec<f64> = graph.exits().iter().map(|e| e.alpha).collect();
    let exits = weights.len();
    let mut loss = vec![0.0; exits];
    let mut correct = vec![0usize; exits];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, &[]);
        let outputs = graph.forward(&x)?;
        let (l, _) = batch_loss_and_logit_grads(&outputs, &labels, &weights)?;
        for p in 0..exits {
            loss[p] += l.per_exit[p] * chunk.len() as f64;
            correct[p] += labels
                .iter()
                .enumerate()
                .filter(|(s, &y)| Tensor::argmax(outputs[p].sample(*s)) == y)
                .count();
        }
    }
    let n = data.len() as f64;
    let loss: Vec<f64> = loss.iter().map(|l| l / n).collect();
    let total = loss.iter().zip(&weights).map(|(l, a)| l * a).sum();
    Ok(ExitStats {
        loss,
        accuracy: correct.iter().map(|c| *c as f64 / n).collect(),
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// 1-based indices of the exits with positive weight; the CSV reports these.
    pub active_exits: Vec<usize>,
    pub records: Vec<EpochRecord>,
}

pub const LOG_UNITS: &str =
    "# epoch: full passes over the training set; lr: step size; loss: mean cross-entropy in nats; acc: fraction correct";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{LOG_UNITS}").unwrap();
        let mut header = vec!["epoch".to_string(), "lr".to_string()];
        for p in &self.active_exits {
            header.push(format!("loss_exit_{p}"));
            header.push(format!("val_loss_exit_{p}"));
            header.push(format!("val_acc_exit_{p}"));
        }
        header.push("phase".into());
        writeln!(s, "{}", header.join(",")).unwrap();
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), format!("{:e}", r.lr)];
            for &p in &self.active_exits {
                row.push(format!("{:.17e}", r.train_loss[p - 1]));
                row.push(format!("{:.17e}", r.val_loss[p - 1]));
                row.push(format!("{:.6}", r.val_acc[p - 1]));
            }
            row.push(r.phase.to_string());
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }

    /// `(epoch, phase, lr)` triples read back from [`TrainLog::to_csv`] output.
    pub fn read_lr_trace(input: impl Read) -> Result<Vec<(usize, u8, f64)>, TrainError> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| TrainError::Data(format!("log has no {name} column")))
        };
        let (ce, cl, cp) = (col("epoch")?, col("lr")?, col("phase")?);
        let mut out = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse_err = |f: &str| TrainError::Data(format!("bad log field {f:?}"));
            out.push((
                rec[ce].parse().map_err(|_| parse_err(&rec[ce]))?,
                rec[cp].parse().map_err(|_| parse_err(&rec[cp]))?,
                rec[cl].parse().map_err(|_| parse_err(&rec[cl]))?,
            ));
        }
        Ok(out)
    }
}

/// Runs both phases on `graph`, which should already be initialised.
/// Exit weights come from `schedule`.
pub fn train(
    graph: &mut Graph,
    schedule: &ExitSchedule,
    train_data: &Dataset,
    val_data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if graph.exits().len() != schedule.len() {
        return Err(TrainError::ScheduleMismatch {
            graph: graph.exits().len(),
            schedule: schedule.len(),
        });
    }
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    graph.set_alphas(schedule.weights());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog {
        active_exits: (1..=schedule.len())
            .filter(|p| schedule.weights()[p - 1] > 0.0)
            .collect(),
        records: Vec::new(),
    };
    let heads: Vec<ParamRef> = graph
        .param_refs()
        .into_iter()
        .filter(|p| matches!(graph.role(*p), Role::Head { .. }))
        .collect();
    let all = graph.param_refs();

    let mut phase = Phase::new(graph, &heads);
    for epoch in 1..=config.phase1_epochs {
        let train_loss = phase.epoch(graph, train_data, config.phase1_lr, config, &mut rng, epoch)?;
        let val = evaluate_exits(graph, val_data, config.batch_size)?;
        log.records.push(record(epoch, 1, config.phase1_lr, train_loss, val));
    }

    let mut phase = Phase::new(graph, &all);
    let mut lr = config.phase2_lr_init;
    let mut history = Vec::new();
    for epoch in config.phase1_epochs + 1..=config.max_epochs {
        let train_loss = phase.epoch(graph, train_data, lr, config, &mut rng, epoch)?;
        let val = evaluate_exits(graph, val_data, config.batch_size)?;
        history.push(val.total);
        log.records.push(record(epoch, 2, lr, train_loss, val));
        let next = plateau_scheduler(&history, lr, config);
        if next != lr {
            lr = next;
            history.clear();
        }
    }
    Ok(log)
}

fn record(epoch: usize, phase: u8, lr: f64, train_loss: Vec<f64>, val: ExitStats) -> EpochRecord {
    EpochRecord {
        epoch,
        phase,
        lr,
        train_loss,
        val_loss: val.loss,
        val_acc: val.accuracy,
    }
}

/// Optimiser state for one phase: the trainable parameters and their velocities.
struct Phase {
    params: Vec<ParamRef>,
    velocity: Vec<Tensor>,
}

impl Phase {
    fn new(graph: &Graph, params: &[ParamRef]) -> Self {
        Self {
            params: params.to_vec(),
            velocity: params.iter().map(|p| Tensor::zeros(graph.param(*p).shape())).collect(),
        }
    }

    /// One pass over shuffled data; returns the sample-weighted mean training
    /// loss of each exit.
    fn epoch(
        &mut self,
        graph: &mut Graph,
        data: &Dataset,
        lr: f64,
        config: &TrainConfig,
        rng: &mut ChaCha8Rng,
        epoch: usize,
    ) -> Result<Vec<f64>, TrainError> {
        let weights: Vec<f64> = graph.exits().iter().map(|e| e.alpha).collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut sums = vec![0.0; weights.len()];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let flips: Vec<bool> = if config.flip_augment {
                chunk.iter().map(|_| rng.random_bool(0.5)).collect()
            } else {
                Vec::new()
            };
            let (x, labels) = data.batch(chunk, &flips);
            let trace = graph.forward_trace(&x)?;
            let outputs = graph.outputs(&trace);
            let (loss, grads) = batch_loss_and_logit_grads(&outputs, &labels, &weights)?;
            if !loss.total.is_finite() || loss.per_exit.iter().any(|l| !l.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    per_exit: loss.per_exit,
                });
            }
            let tape = graph.backward_logits(&trace, &grads)?;
            for (p, v) in self.params.iter().zip(&mut self.velocity) {
                sgd_momentum_step(graph.param_mut(*p), tape.get(*p), v, lr, config.momentum)?;
            }
            for (s, l) in sums.iter_mut().zip(&loss.per_exit) {
                *s += l * chunk.len() as f64;
            }
        }
        Ok(sums.iter().map(|s| s / data.len() as f64).collect())
    }
}
