//! End-to-end training behaviour on small synthetic tasks.

mod common;

use common::*;
use elastic_nn::arch::{ArchitectureDescriptor, Block};
use elastic_nn::elastic::ExitSchedule;
use elastic_nn::graph::layer::{LayerSpec, Padding};
use elastic_nn::graph::{build_graph, checkpoint, Role};
use elastic_nn::trainer::{self, synthetic_shapes, Dataset, TrainConfig, TrainError, TrainLog};
use rand::Rng;

#[test]
fn head_phase_leaves_trunk_bit_identical() {
    let desc = toy_elastic();
    let mut g = build_graph(&desc).unwrap();
    trainer::initialize(&mut g, 5, 1.0);
    let before = g.clone();
    let config = TrainConfig {
        phase1_epochs: 3,
        max_epochs: 3,
        ..toy_config(5)
    };
    let (train, val) = (synthetic_shapes(200, 8, 1), synthetic_shapes(50, 8, 2));
    let schedule = ExitSchedule::from_descriptor(&desc).unwrap();
    trainer::train(&mut g, &schedule, &train, &val, &config).unwrap();
    let mut heads_moved = false;
    for p in g.param_refs() {
        let (old, new) = (before.param(p).data(), g.param(p).data());
        match g.role(p) {
            Role::Head { .. } => heads_moved |= old != new,
            _ => assert!(old.iter().zip(new).all(|(a, b)| a.to_bits() == b.to_bits())),
        }
    }
    assert!(heads_moved);
}

/// Two classes told apart by which half of a 4x4 image is brighter.
fn halves(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        for _row in 0..4 {
            for col in 0..4 {
                let bright = (col < 2) == (label == 0);
                pixels.push(if bright {
                    r.random_range(0.6..1.0)
                } else {
                    r.random_range(0.0..0.4)
                });
            }
        }
        labels.push(label);
    }
    Dataset::new([1, 4, 4], pixels, labels).unwrap()
}

fn separable_net() -> ArchitectureDescriptor {
    ArchitectureDescriptor {
        name: "halves".into(),
        input_shape: [4, 4, 1],
        width_multiplier: None,
        num_classes: 2,
        blocks: vec![Block {
            name: "b1".into(),
            layers: vec![conv(4, 3, 1, Padding::Same), LayerSpec::Relu],
        }],
        exits: vec![],
    }
}

#[test]
fn separable_task_reaches_low_loss() {
    let desc = separable_net();
    let mut g = build_graph(&desc).unwrap();
    trainer::initialize(&mut g, 1, 1.0);
    let config = TrainConfig {
        batch_size: 16,
        phase1_epochs: 2,
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let schedule = ExitSchedule::from_descriptor(&desc).unwrap();
    let log = trainer::train(&mut g, &schedule, &halves(200, 1), &halves(100, 2), &config).unwrap();
    let best = log.records.iter().map(|r| r.val_loss[0]).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "best validation loss {best}");
    assert_eq!(log.records.last().unwrap().val_acc[0], 1.0);
}

#[test]
fn training_is_deterministic_per_seed() {
    let desc = toy_elastic();
    let config = TrainConfig {
        phase1_epochs: 2,
        max_epochs: 4,
        flip_augment: true,
        ..toy_config(9)
    };
    let (g1, l1) = train_toy(&desc, &config);
    let (g2, l2) = train_toy(&desc, &config);
    assert_eq!(l1.to_csv(), l2.to_csv());
    let bytes = |g| {
        let mut buf = Vec::new();
        checkpoint::write_params(g, &mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(&g1), bytes(&g2));
    let (_, l3) = train_toy(&desc, &TrainConfig { seed: 10, ..config });
    assert_ne!(l1.to_csv(), l3.to_csv());
}

#[test]
fn divergence_is_reported() {
    let desc = toy_elastic();
    let mut g = build_graph(&desc).unwrap();
    trainer::initialize(&mut g, 2, 1.0);
    let last_head = *g
        .param_refs()
        .iter()
        .rfind(|p| g.role(**p) == Role::Head { exit: 2 })
        .unwrap();
    g.param_mut(last_head).data_mut()[0] = f64::NAN;
    let config = TrainConfig {
        phase1_epochs: 1,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let schedule = ExitSchedule::from_descriptor(&desc).unwrap();
    let err = trainer::train(
        &mut g,
        &schedule,
        &synthetic_shapes(64, 8, 1),
        &synthetic_shapes(16, 8, 2),
        &config,
    )
    .unwrap_err();
    match err {
        TrainError::NonFiniteLoss { epoch, batch, per_exit } => {
            assert_eq!((epoch, batch), (1, 1));
            assert!(per_exit[0].is_finite() && per_exit[2].is_nan());
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn log_round_trips_learning_rates() {
    let log = TrainLog {
        active_exits: vec![2, 3],
        records: vec![],
    };
    assert!(TrainLog::read_lr_trace(log.to_csv().as_bytes()).unwrap().is_empty());
    let (_, log) = train_toy(
        &toy_elastic(),
        &TrainConfig {
            phase1_epochs: 1,
            max_epochs: 2,
            ..toy_config(1)
        },
    );
    let trace = TrainLog::read_lr_trace(log.to_csv().as_bytes()).unwrap();
    assert_eq!(trace, vec![(1, 1, 1e-3), (2, 2, 1e-2)]);
}

#[test]
fn bundled_dataset_loads() {
    let hwc = [8, 8, 1];
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data/");
    let train = Dataset::load_csv(format!("{dir}shapes_train.csv"), hwc).unwrap();
    let val = Dataset::load_csv(format!("{dir}shapes_val.csv"), hwc).unwrap();
    assert_eq!((train.len(), val.len()), (1500, 500));
    assert_eq!(train, synthetic_shapes(1500, 8, 1));
    assert_eq!(val, synthetic_shapes(500, 8, 2));
}
