//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use elastic_nn::arch::{zoo, ArchitectureDescriptor, ExitHeadSpec};
use elastic_nn::elastic::{batch_loss_and_logit_grads, elastify, midpoint_schedule, ExitSchedule};
use elastic_nn::graph::layer::{LayerSpec, Padding};
use elastic_nn::graph::{Graph, GraphBuilder, Role};
use elastic_nn::tensor::Tensor;
use elastic_nn::trainer::{self, Dataset, TrainConfig, TrainLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Total multi-exit loss of `graph` on a batch, using the graph's exit weights.
pub fn loss(graph: &Graph, x: &Tensor, labels: &[usize]) -> f64 {
    let weights: Vec<f64> = graph.exits().iter().map(|e| e.alpha).collect();
    let outputs = graph.forward(x).unwrap();
    batch_loss_and_logit_grads(&outputs, labels, &weights).unwrap().0.total
}

/// `|a - n| / max(|a|, |n|, 1e-6)`: relative error, with an absolute floor
/// so vanishing gradients are not judged on round-off alone.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient of [`loss`] and
/// central differences, over every parameter and every input element.
pub fn max_gradient_error(graph: &mut Graph, x: &Tensor, labels: &[usize]) -> f64 {
    let weights: Vec<f64> = graph.exits().iter().map(|e| e.alpha).collect();
    let trace = graph.forward_trace(x).unwrap();
    let outputs = graph.outputs(&trace);
    let (_, grads) = batch_loss_and_logit_grads(&outputs, labels, &weights).unwrap();
    let tape = graph.backward_logits(&trace, &grads).unwrap();
    let mut worst: f64 = 0.0;
    for p in graph.param_refs() {
        let analytic = tape.get(p).clone();
        for i in 0..analytic.len() {
            let orig = graph.param(p).data()[i];
            graph.param_mut(p).data_mut()[i] = orig + FD_STEP;
            let up = loss(graph, x, labels);
            graph.param_mut(p).data_mut()[i] = orig - FD_STEP;
            let down = loss(graph, x, labels);
            graph.param_mut(p).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let up = loss(graph, &xp, labels);
        xp.data_mut()[i] = orig - FD_STEP;
        let down = loss(graph, &xp, labels);
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_err(tape.input().data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// `input -> layer -> [flatten] -> dense(classes) -> softmax` with a single
/// exit, He-initialised and with small random biases.
pub fn single_layer_net(layer: &LayerSpec, input: &[usize], classes: usize, seed: u64) -> Graph {
    let mut b = GraphBuilder::new(input.to_vec());
    let trunk = Role::Trunk { block: 0 };
    let head = Role::Head { exit: 0 };
    let mut at = b.layer(layer, b.input(), 1.0, trunk).unwrap();
    if b.shape(at).len() > 1 {
        at = b.layer(&LayerSpec::Flatten, at, 1.0, head).unwrap();
    }
    let dense = LayerSpec::Dense {
        units: classes,
        inputs: None,
    };
    at = b.layer(&dense, at, 1.0, head).unwrap();
    at = b.layer(&LayerSpec::Softmax, at, 1.0, head).unwrap();
    b.exit(at, 1, 1.0);
    let mut g = b.finish(classes).unwrap();
    g.init_params(seed);
    let mut r = rng(seed ^ 0xb1a5);
    for p in g.param_refs() {
        if p.index == 1 {
            for v in g.param_mut(p).data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
    g
}

pub fn conv(filters: usize, k: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel: [k, k],
        stride,
        padding,
        in_channels: None,
    }
}

/// Toy 3-block backbone with its exits stripped, i.e. the plain network.
pub fn toy_backbone() -> ArchitectureDescriptor {
    let mut d = zoo::toy_cnn(8, 4, 2);
    d.exits.clear();
    d
}

pub fn toy_elastic() -> ArchitectureDescriptor {
    elastify(
        &toy_backbone(),
        &midpoint_schedule(3, 2).unwrap(),
        &ExitHeadSpec::new(4),
    )
    .unwrap()
}

pub fn toy_baseline() -> ArchitectureDescriptor {
    elastify(
        &toy_backbone(),
        &ExitSchedule::single(3).unwrap(),
        &ExitHeadSpec::new(4),
    )
    .unwrap()
}

pub fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        phase1_epochs: 5,
        max_epochs: 50,
        seed,
        ..TrainConfig::default()
    }
}

/// The bundled 8x8 shapes task. Every seed trains on the same data; the seed
/// only drives initialisation, shuffling and augmentation.
pub fn toy_data() -> (Dataset, Dataset) {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data/");
    let load = |f: &str| Dataset::load_csv(format!("{dir}{f}"), [8, 8, 1]).unwrap();
    (load("shapes_train.csv"), load("shapes_val.csv"))
}

/// Trains a fresh network from `desc` on the toy task.
pub fn train_toy(desc: &ArchitectureDescriptor, config: &TrainConfig) -> (Graph, TrainLog) {
    let mut g = elastic_nn::graph::build_graph(desc).unwrap();
    trainer::initialize(&mut g, config.seed, config.output_init_scale);
    let schedule = ExitSchedule::from_descriptor(desc).unwrap();
    let (train, val) = toy_data();
    let log = trainer::train(&mut g, &schedule, &train, &val, config).unwrap();
    (g, log)
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// The toy backbone assembled layer by layer with a single softmax head.
pub fn hand_built_plain_net() -> Graph {
    let trunk = |b| Role::Trunk { block: b };
    let mut g = GraphBuilder::new(vec![1, 8, 8]);
    let mut at = g.input();
    let pool = LayerSpec::MaxPool {
        size: [2, 2],
        stride: 2,
        padding: Padding::Valid,
    };
    for (block, filters) in [8, 16, 32].into_iter().enumerate() {
        at = g
            .layer(&conv(filters, 3, 1, Padding::Same), at, 1.0, trunk(block))
            .unwrap();
        at = g.layer(&LayerSpec::Relu, at, 1.0, trunk(block)).unwrap();
        if block < 2 {
            at = g.layer(&pool, at, 1.0, trunk(block)).unwrap();
        }
    }
    let head = Role::Head { exit: 0 };
    at = g.layer(&LayerSpec::GlobalAvgPool, at, 1.0, head).unwrap();
    at = g
        .layer(&LayerSpec::Dense { units: 4, inputs: None }, at, 1.0, head)
        .unwrap();
    at = g.layer(&LayerSpec::Softmax, at, 1.0, head).unwrap();
    g.exit(at, 3, 1.0);
    g.finish(4).unwrap()
}

/// Copies parameters pairwise in order; shapes must agree.
pub fn copy_params(from: &Graph, to: &mut Graph, to_refs: &[elastic_nn::graph::ParamRef]) {
    let from_refs = from.param_refs();
    assert_eq!(from_refs.len(), to_refs.len());
    for (a, b) in from_refs.iter().zip(to_refs) {
        assert_eq!(from.param(*a).shape(), to.param(*b).shape());
        *to.param_mut(*b) = from.param(*a).clone();
    }
}

/// Largest absolute difference in loss, parameter gradients and input
/// gradients between two graphs over `samples` random single inputs.
pub fn max_loss_and_grad_diff(
    a: &Graph,
    b: &Graph,
    b_refs: &[elastic_nn::graph::ParamRef],
    samples: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = Tensor::from_fn(&[1, 1, 8, 8], |_| r.random_range(0.0..1.0));
        let label = r.random_range(0..4);
        let run = |g: &Graph| {
            let weights: Vec<f64> = g.exits().iter().map(|e| e.alpha).collect();
            let trace = g.forward_trace(&x).unwrap();
            let (l, grads) = batch_loss_and_logit_grads(&g.outputs(&trace), &[label], &weights).unwrap();
            (l.total, g.backward_logits(&trace, &grads).unwrap())
        };
        let (la, ta) = run(a);
        let (lb, tb) = run(b);
        worst = worst.max((la - lb).abs());
        for (pa, pb) in a.param_refs().iter().zip(b_refs) {
            for (u, v) in ta.get(*pa).data().iter().zip(tb.get(*pb).data()) {
                worst = worst.max((u - v).abs());
            }
        }
        for (u, v) in ta.input().data().iter().zip(tb.input().data()) {
            worst = worst.max((u - v).abs());
        }
    }
    worst
}

/// One small network per layer kind: `(name, layer, per-sample input shape)`.
pub fn layer_cases() -> Vec<(&'static str, LayerSpec, Vec<usize>)> {
    let pool = |max: bool, k: usize, stride: usize, padding: Padding| {
        if max {
            LayerSpec::MaxPool {
                size: [k, k],
                stride,
                padding,
            }
        } else {
            LayerSpec::AvgPool {
                size: [k, k],
                stride,
                padding,
            }
        }
    };
    vec![
        ("dense", LayerSpec::Dense { units: 5, inputs: None }, vec![6]),
        ("conv same", conv(3, 3, 1, Padding::Same), vec![2, 5, 5]),
        ("conv valid", conv(3, 3, 1, Padding::Valid), vec![2, 5, 5]),
        ("conv stride 2", conv(2, 3, 2, Padding::Same), vec![2, 6, 6]),
        (
            "depthwise",
            LayerSpec::DepthwiseConv2d {
                kernel: [3, 3],
                stride: 2,
                padding: Padding::Same,
            },
            vec![3, 5, 5],
        ),
        (
            "pointwise",
            LayerSpec::PointwiseConv2d { filters: 4, stride: 1 },
            vec![3, 4, 4],
        ),
        ("maxpool valid", pool(true, 2, 2, Padding::Valid), vec![2, 4, 4]),
        ("maxpool same", pool(true, 3, 2, Padding::Same), vec![2, 5, 5]),
        ("avgpool same", pool(false, 3, 2, Padding::Same), vec![2, 5, 5]),
        ("global avgpool", LayerSpec::GlobalAvgPool, vec![3, 4, 4]),
        ("relu", LayerSpec::Relu, vec![2, 4, 4]),
        ("flatten", LayerSpec::Flatten, vec![2, 3, 3]),
        ("softmax", LayerSpec::Softmax, vec![6]),
        (
            "residual identity",
            LayerSpec::Residual {
                main: vec![conv(2, 3, 1, Padding::Same), LayerSpec::Relu],
                shortcut: vec![],
            },
            vec![2, 4, 4],
        ),
        (
            "residual projection",
            LayerSpec::Residual {
                main: vec![conv(4, 3, 2, Padding::Same)],
                shortcut: vec![LayerSpec::PointwiseConv2d { filters: 4, stride: 2 }],
            },
            vec![2, 4, 4],
        ),
        (
            "concat",
            LayerSpec::Concat {
                branches: vec![
                    vec![LayerSpec::PointwiseConv2d { filters: 2, stride: 1 }],
                    vec![conv(3, 3, 1, Padding::Same)],
                    vec![pool(true, 3, 1, Padding::Same)],
                ],
            },
            vec![2, 4, 4],
        ),
    ]
}

/// Gradient error of one layer case on a fixed two-sample batch.
pub fn layer_case_error(layer: &LayerSpec, input: &[usize]) -> f64 {
    let mut g = single_layer_net(layer, input, 3, 7);
    let shape: Vec<usize> = std::iter::once(2).chain(input.iter().copied()).collect();
    let x = random_tensor(&shape, &mut rng(11));
    max_gradient_error(&mut g, &x, &[0, 2])
}

/// Gradient error of the weighted three-exit loss on the toy network.
pub fn three_exit_error() -> f64 {
    let mut g = elastic_nn::graph::build_graph(&zoo::toy_cnn(8, 4, 1)).unwrap();
    trainer::initialize(&mut g, 3, 1.0);
    g.set_alphas(&[0.2, 0.3, 0.5]);
    let mut r = rng(5);
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| r.random_range(0.0..1.0));
    max_gradient_error(&mut g, &x, &[1, 3])
}
