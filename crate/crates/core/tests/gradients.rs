//! Analytic gradients against central finite differences.

mod common;

use common::*;
use elastic_nn::arch::zoo;
use elastic_nn::graph::build_graph;
use elastic_nn::tensor::Tensor;
use elastic_nn::trainer;

const TOL: f64 = 1e-4;

#[test]
fn every_layer_kind() {
    let mut failures = Vec::new();
    for (name, layer, input) in layer_cases() {
        let err = layer_case_error(&layer, &input);
        if err.is_nan() || err >= TOL {
            failures.push(format!("{name}: {err:e}"));
        }
    }
    assert!(failures.is_empty(), "max relative error over {TOL:e}: {failures:?}");
}

#[test]
fn multi_exit_loss_on_three_exit_net() {
    let err = three_exit_error();
    assert!(err < TOL, "three-exit loss: max relative error {err:e}");
}

#[test]
fn exit_probability_backward_matches_logit_backward() {
    // dL/dp = -alpha t / (n p) pushed through softmax must equal alpha (p - t) / n.
    let mut g = build_graph(&zoo::toy_cnn(8, 4, 1)).unwrap();
    trainer::initialize(&mut g, 4, 1.0);
    g.set_alphas(&[0.5, 1.0, 2.0]);
    let x = random_tensor(&[3, 1, 8, 8], &mut rng(6));
    let labels = [0, 1, 2];
    let trace = g.forward_trace(&x).unwrap();
    let outputs = g.outputs(&trace);
    let weights: Vec<f64> = g.exits().iter().map(|e| e.alpha).collect();
    let (_, logit_grads) = elastic_nn::elastic::batch_loss_and_logit_grads(&outputs, &labels, &weights).unwrap();
    let prob_grads: Vec<Tensor> = outputs
        .iter()
        .zip(&weights)
        .map(|(o, a)| {
            let mut g = Tensor::zeros(o.shape());
            for (s, &l) in labels.iter().enumerate() {
                g.data_mut()[s * 4 + l] = -a / (3.0 * o.sample(s)[l]);
            }
            g
        })
        .collect();
    let via_logits = g.backward_logits(&trace, &logit_grads).unwrap();
    let via_probs = g.backward(&trace, &prob_grads).unwrap();
    for ((_, a), (_, b)) in via_logits.iter().zip(via_probs.iter()) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }
}
