//! Minimal differentiable computation graph.
//!
//! A [`Graph`] is a topologically ordered list of nodes with explicit
//! predecessor lists, so residual adds and parallel branches are ordinary
//! nodes. Every exit is a softmax node; [`Graph::forward`] returns the exit
//! probabilities in pipeline order and [`Graph::backward`] turns upstream
//! gradients at the exits into a [`GradientTape`].

pub mod checkpoint;
pub mod kernels;
pub mod layer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{layer_location, mismatch, ArchitectureDescriptor, DescriptorError};
use crate::tensor::{Tensor, TensorError};
use layer::{LayerSpec, ShapeIssue, Window};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("shape mismatch at {at}: expected {expected}, got {got:?}")]
    ShapeMismatch {
        at: String,
        expected: String,
        got: Vec<usize>,
    },
    #[error("non-finite input: {0}")]
    NonFinite(#[from] TensorError),
    #[error("exit {exit} out of range (graph has {count} exits)")]
    NoSuchExit { exit: usize, count: usize },
}

impl GraphError {
    fn shape(at: impl Into<String>, expected: impl Into<String>, got: &[usize]) -> Self {
        Self::ShapeMismatch {
            at: at.into(),
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}

/// A resolved operation with concrete dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Dense { inputs: usize, units: usize },
    Conv2d(Window),
    DepthwiseConv2d(Window),
    MaxPool(Window),
    AvgPool(Window),
    GlobalAvgPool,
    Relu,
    Softmax,
    Flatten,
    Add,
    Concat,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Dense { .. } => "dense",
            Op::Conv2d(_) => "conv2d",
            Op::DepthwiseConv2d(_) => "depthwise_conv2d",
            Op::MaxPool(_) => "max_pool",
            Op::AvgPool(_) => "avg_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Flatten => "flatten",
            Op::Add => "add",
            Op::Concat => "concat",
        }
    }

    /// Shapes of the weight and bias tensors.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Op::Dense { inputs, units } => vec![vec![*units, *inputs], vec![*units]],
            Op::Conv2d(g) => vec![vec![g.out_c, g.in_c, g.kh, g.kw], vec![g.out_c]],
            Op::DepthwiseConv2d(g) => vec![vec![g.in_c, g.kh, g.kw], vec![g.in_c]],
            _ => vec![],
        }
    }

    /// `(fan_in, fan_out)` of the weight tensor.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self {
            Op::Dense { inputs, units } => Some((*inputs, *units)),
            Op::Conv2d(g) => Some((g.in_c * g.kh * g.kw, g.out_c * g.kh * g.kw)),
            Op::DepthwiseConv2d(g) => Some((g.kh * g.kw, g.kh * g.kw)),
            _ => None,
        }
    }
}

/// Which part of the network a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Input,
    /// Backbone layer inside 0-based block `block`.
    Trunk {
        block: usize,
    },
    /// Output layer of exit `exit` (0-based).
    Head {
        exit: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape.
    pub shape: Vec<usize>,
    pub params: Vec<Tensor>,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exit {
    /// Softmax node producing the probabilities.
    pub node: NodeId,
    /// 1-based block the exit reads from.
    pub block: usize,
    pub alpha: f64,
}

/// Location of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamRef {
    pub node: NodeId,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    exits: Vec<Exit>,
    num_classes: usize,
}

/// Incremental graph construction. Nodes are appended in topological order.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    exits: Vec<Exit>,
}

impl GraphBuilder {
    /// Starts a graph whose input has per-sample shape `input_shape`.
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
                shape: input_shape,
                params: vec![],
                role: Role::Input,
            }],
            exits: vec![],
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    pub fn set_role(&mut self, node: NodeId, role: Role) {
        self.nodes[node].role = role;
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node].op
    }

    /// Appends a resolved op. Parameters start at zero.
    pub fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, role: Role) -> NodeId {
        let params = op.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            params,
            role,
        });
        self.nodes.len() - 1
    }

    /// Appends one declarative layer (expanding composites) after `from`.
    pub fn layer(&mut self, spec: &LayerSpec, from: NodeId, width: f64, role: Role) -> Result<NodeId, ShapeIssue> {
        let input = self.nodes[from].shape.clone();
        let out = spec.output_shape(&input, width)?;
        if let Some(w) = spec.window(&input, width)? {
            let op = match spec {
                LayerSpec::Conv2d { .. } | LayerSpec::PointwiseConv2d { .. } => Op::Conv2d(w),
                LayerSpec::DepthwiseConv2d { .. } => Op::DepthwiseConv2d(w),
                LayerSpec::MaxPool { .. } => Op::MaxPool(w),
                LayerSpec::AvgPool { .. } => Op::AvgPool(w),
                _ => unreachable!("only windowed layers resolve a window"),
            };
            return Ok(self.push(op, vec![from], out, role));
        }
        let id = match spec {
            LayerSpec::Dense { units, .. } => self.push(
                Op::Dense {
                    inputs: input[0],
                    units: *units,
                },
                vec![from],
                out,
                role,
            ),
            LayerSpec::GlobalAvgPool => self.push(Op::GlobalAvgPool, vec![from], out, role),
            LayerSpec::Relu => self.push(Op::Relu, vec![from], out, role),
            LayerSpec::Softmax => self.push(Op::Softmax, vec![from], out, role),
            LayerSpec::Flatten => self.push(Op::Flatten, vec![from], out, role),
            LayerSpec::Residual { main, shortcut } => {
                let a = self.chain(main, from, width, role)?;
                let b = self.chain(shortcut, from, width, role)?;
                self.push(Op::Add, vec![a, b], out, role)
            }
            LayerSpec::Concat { branches } => {
                let ends = branches
                    .iter()
                    .map(|b| self.chain(b, from, width, role))
                    .collect::<Result<Vec<_>, _>>()?;
                self.push(Op::Concat, ends, out, role)
            }
            _ => unreachable!("windowed layers handled above"),
        };
        Ok(id)
    }

    /// Appends layers in sequence; an empty chain returns `from`.
    pub fn chain(&mut self, layers: &[LayerSpec], from: NodeId, width: f64, role: Role) -> Result<NodeId, ShapeIssue> {
        layers.iter().try_fold(from, |at, l| self.layer(l, at, width, role))
    }

    /// Designates a softmax node as the next exit.
    pub fn exit(&mut self, node: NodeId, block: usize, alpha: f64) {
        self.exits.push(Exit { node, block, alpha });
    }

    pub fn finish(self, num_classes: usize) -> Result<Graph, GraphError> {
        for (i, e) in self.exits.iter().enumerate() {
            let n = &self.nodes[e.node];
            if n.op != Op::Softmax || n.shape != [num_classes] {
                return Err(GraphError::shape(
                    format!("exit {}", i + 1),
                    format!("softmax over [{num_classes}]"),
                    &n.shape,
                ));
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            exits: self.exits,
            num_classes,
        })
    }
}

/// Builds the graph for a descriptor: one node per layer, one head per exit.
/// Parameters start at zero.
pub fn build_graph(desc: &ArchitectureDescriptor) -> Result<Graph, GraphError> {
    desc.validate()?;
    let width = desc.width();
    let exits = desc.effective_exits();
    let mut b = GraphBuilder::new(desc.input_chw());
    let mut at = b.input();
    let mut next_exit = 0;
    for (bi, block) in desc.blocks.iter().enumerate() {
        for (li, spec) in block.layers.iter().enumerate() {
            at = b
                .layer(spec, at, width, Role::Trunk { block: bi })
                .map_err(|issue| mismatch(layer_location(bi, &block.name, li, spec), issue))?;
        }
        if let Some(e) = exits.get(next_exit).filter(|e| e.block == bi + 1) {
            let role = Role::Head { exit: next_exit };
            if desc.is_classifier_block(bi) {
                b.set_role(at, role);
            }
            let head = desc.head_layers(bi, b.shape(at));
            let out = b
                .chain(&head, at, 1.0, role)
                .map_err(|issue| mismatch(format!("exit head on block {}", bi + 1), issue))?;
            b.exit(out, e.block, e.alpha);
            next_exit += 1;
        }
    }
    b.finish(desc.num_classes)
}

/// Activations of one forward pass, kept for [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Option<Tensor>>,
    batch: usize,
    batched: bool,
}

impl Trace {
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values[node].as_ref()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients aligned 1:1 with the graph parameters, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    params: Vec<Vec<Tensor>>,
    input: Tensor,
}

impl GradientTape {
    pub fn get(&self, p: ParamRef) -> &Tensor {
        &self.params[p.node][p.index]
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, &Tensor)> {
        self.params.iter().enumerate().flat_map(|(node, ts)| {
            ts.iter()
                .enumerate()
                .map(move |(index, t)| (ParamRef { node, index }, t))
        })
    }

    /// Elementwise sum with another tape of the same graph.
    pub fn add(&mut self, other: &GradientTape) {
        for (a, b) in self.params.iter_mut().flatten().zip(other.params.iter().flatten()) {
            a.add_assign(b);
        }
        self.input.add_assign(&other.input);
    }

    pub fn max_abs(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn exits(&self) -> &[Exit] {
        &self.exits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn set_alphas(&mut self, alphas: &[f64]) {
        assert_eq!(alphas.len(), self.exits.len());
        for (e, a) in self.exits.iter_mut().zip(alphas) {
            e.alpha = *a;
        }
    }

    pub fn param_refs(&self) -> Vec<ParamRef> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(node, n)| (0..n.params.len()).map(move |index| ParamRef { node, index }))
            .collect()
    }

    pub fn param(&self, p: ParamRef) -> &Tensor {
        &self.nodes[p.node].params[p.index]
    }

    pub fn param_mut(&mut self, p: ParamRef) -> &mut Tensor {
        &mut self.nodes[p.node].params[p.index]
    }

    pub fn role(&self, p: ParamRef) -> Role {
        self.nodes[p.node].role
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).map(Tensor::len).sum()
    }

    /// Uniform He initialisation `U(-sqrt(6/fan_in), sqrt(6/fan_in))` for every
    /// weight; biases zero.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in &mut self.nodes {
            if let Some((fan_in, _)) = node.op.fans() {
                let r = (6.0 / fan_in as f64).sqrt();
                for v in node.params[0].data_mut() {
                    *v = rng.random_range(-r..r);
                }
                node.params[1].data_mut().fill(0.0);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, bool), GraphError> {
        let want = self.input_shape();
        let (batch, batched) = if x.shape() == want {
            (1, false)
        } else if x.rank() == want.len() + 1 && &x.shape()[1..] == want {
            (x.shape()[0], true)
        } else {
            return Err(GraphError::shape(
                "graph input",
                format!("{want:?} or [n, ..{want:?}]"),
                x.shape(),
            ));
        };
        x.check_finite()?;
        Ok((batch, batched))
    }

    /// Exit probabilities in pipeline order.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>, GraphError> {
        Ok(self.outputs(&self.forward_trace(x)?))
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace, GraphError> {
        let needed = vec![true; self.nodes.len()];
        self.run(x, &needed)
    }

    /// Evaluates only the nodes exit `exit` depends on.
    pub fn forward_to_exit(&self, x: &Tensor, exit: usize) -> Result<(Tensor, usize), GraphError> {
        let e = self.exits.get(exit).ok_or(GraphError::NoSuchExit {
            exit,
            count: self.exits.len(),
        })?;
        let needed = self.ancestors(e.node);
        let evaluated = needed.iter().filter(|&&n| n).count();
        let trace = self.run(x, &needed)?;
        Ok((
            self.unbatch(&trace, trace.values[e.node].clone().expect("exit evaluated")),
            evaluated,
        ))
    }

    /// Nodes `node` depends on, including itself.
    pub fn ancestors(&self, node: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if !mark[n] {
                mark[n] = true;
                stack.extend(&self.nodes[n].inputs);
            }
        }
        mark
    }

    pub fn outputs(&self, trace: &Trace) -> Vec<Tensor> {
        self.exits
            .iter()
            .map(|e| self.unbatch(trace, trace.values[e.node].clone().expect("exit evaluated")))
            .collect()
    }

    fn unbatch(&self, trace: &Trace, t: Tensor) -> Tensor {
        if trace.batched {
            t
        } else {
            let shape = t.shape()[1..].to_vec();
            t.reshaped(&shape)
        }
    }

    fn run(&self, x: &Tensor, needed: &[bool]) -> Result<Trace, GraphError> {
        let (n, batched) = self.check_input(x)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let input_shape: Vec<usize> = std::iter::once(n).chain(self.input_shape().iter().copied()).collect();
        values[0] = Some(x.clone().reshaped(&input_shape));
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            if !needed[id] {
                continue;
            }
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&i| values[i].as_ref().expect("topological order"))
                .collect();
            let data = forward_node(node, &ins, n);
            let shape: Vec<usize> = std::iter::once(n).chain(node.shape.iter().copied()).collect();
            values[id] = Some(Tensor::new(shape, data).expect("kernel output matches node shape"));
        }
        Ok(Trace {
            values,
            batch: n,
            batched,
        })
    }

    /// Reverse pass from upstream gradients at the exit probabilities,
    /// one tensor per exit shaped like that exit's output.
    pub fn backward(&self, trace: &Trace, exit_grads: &[Tensor]) -> Result<GradientTape, GraphError> {
        let seeds = self.seeds(trace, exit_grads, |e| e.node)?;
        Ok(self.backward_seeded(trace, seeds))
    }

    /// Reverse pass from gradients with respect to each exit's pre-softmax logits.
    pub fn backward_logits(&self, trace: &Trace, logit_grads: &[Tensor]) -> Result<GradientTape, GraphError> {
        let seeds = self.seeds(trace, logit_grads, |e| self.nodes[e.node].inputs[0])?;
        Ok(self.backward_seeded(trace, seeds))
    }

    fn seeds(
        &self,
        trace: &Trace,
        grads: &[Tensor],
        target: impl Fn(&Exit) -> NodeId,
    ) -> Result<Vec<(NodeId, Tensor)>, GraphError> {
        if grads.len() != self.exits.len() {
            return Err(GraphError::shape(
                "backward",
                format!("{} exit gradients", self.exits.len()),
                &[grads.len()],
            ));
        }
        self.exits
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (e, g))| {
                let node = target(e);
                let v = trace.values[node].as_ref().expect("exit evaluated");
                let ok = g.shape() == v.shape() || (!trace.batched && g.shape() == &v.shape()[1..]);
                if !ok {
                    return Err(GraphError::shape(
                        format!("gradient for exit {}", i + 1),
                        format!("{:?}", v.shape()),
                        g.shape(),
                    ));
                }
                Ok((node, g.clone().reshaped(v.shape())))
            })
            .collect()
    }

    fn backward_seeded(&self, trace: &Trace, seeds: Vec<(NodeId, Tensor)>) -> GradientTape {
        let n = trace.batch;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (node, g) in seeds {
            accumulate(&mut grads[node], g);
        }
        let mut params: Vec<Vec<Tensor>> = self
            .nodes
            .iter()
            .map(|node| node.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        for id in (1..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&i| trace.values[i].as_ref().expect("forward visited"))
                .collect();
            let y = trace.values[id].as_ref().expect("forward visited");
            let (dins, dparams) = backward_node(node, &ins, y, &gy, n);
            for (p, d) in params[id].iter_mut().zip(dparams) {
                p.data_mut().copy_from_slice(&d);
            }
            for (&src, d) in node.inputs.iter().zip(dins) {
                let t = Tensor::new(trace.values[src].as_ref().expect("forward visited").shape().to_vec(), d)
                    .expect("gradient matches activation");
                accumulate(&mut grads[src], t);
            }
        }
        let input_shape = trace.values[0].as_ref().expect("input").shape().to_vec();
        let input = grads[0].take().unwrap_or_else(|| Tensor::zeros(&input_shape));
        let input = if trace.batched {
            input
        } else {
            input.reshaped(&input_shape[1..])
        };
        GradientTape { params, input }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn forward_node(node: &Node, ins: &[&Tensor], n: usize) -> Vec<f64> {
    let x = ins[0].data();
    match &node.op {
        Op::Input => unreachable!("input is seeded"),
        Op::Dense { inputs, units } => {
            kernels::dense_forward(x, node.params[0].data(), node.params[1].data(), n, *inputs, *units)
        }
        Op::Conv2d(g) => kernels::conv_forward(x, node.params[0].data(), node.params[1].data(), n, g),
        Op::DepthwiseConv2d(g) => kernels::depthwise_forward(x, node.params[0].data(), node.params[1].data(), n, g),
        Op::MaxPool(g) => kernels::max_pool_forward(x, n, g),
        Op::AvgPool(g) => kernels::avg_pool_forward(x, n, g),
        Op::GlobalAvgPool => {
            let s = ins[0].shape();
            kernels::global_avg_forward(x, n * s[1], s[2] * s[3])
        }
        Op::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        Op::Softmax => kernels::softmax_forward(x, n, node.shape[0]),
        Op::Flatten => x.to_vec(),
        Op::Add => {
            let mut y = x.to_vec();
            for other in &ins[1..] {
                for (a, b) in y.iter_mut().zip(other.data()) {
                    *a += b;
                }
            }
            y
        }
        Op::Concat => {
            let mut y = Vec::with_capacity(n * node.shape.iter().product::<usize>());
            for s in 0..n {
                for t in ins {
                    y.extend_from_slice(t.sample(s));
                }
            }
            y
        }
    }
}

/// Returns (input gradients, parameter gradients).
fn backward_node(node: &Node, ins: &[&Tensor], y: &Tensor, gy: &Tensor, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let x = ins[0].data();
    let g = gy.data();
    match &node.op {
        Op::Input => unreachable!("input has no predecessors"),
        Op::Dense { inputs, units } => {
            let (dx, dw, db) = kernels::dense_backward(x, node.params[0].data(), g, n, *inputs, *units);
            (vec![dx], vec![dw, db])
        }
        Op::Conv2d(w) => {
            let (dx, dw, db) = kernels::conv_backward(x, node.params[0].data(), g, n, w);
            (vec![dx], vec![dw, db])
        }
        Op::DepthwiseConv2d(w) => {
            let (dx, dw, db) = kernels::depthwise_backward(x, node.params[0].data(), g, n, w);
            (vec![dx], vec![dw, db])
        }
        Op::MaxPool(w) => (vec![kernels::max_pool_backward(x, g, n, w)], vec![]),
        Op::AvgPool(w) => (vec![kernels::avg_pool_backward(x.len(), g, n, w)], vec![]),
        Op::GlobalAvgPool => {
            let s = ins[0].shape();
            (vec![kernels::global_avg_backward(g, s[2] * s[3])], vec![])
        }
        Op::Relu => (
            vec![x
                .iter()
                .zip(g)
                .map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect()],
            vec![],
        ),
        Op::Softmax => (vec![kernels::softmax_backward(y.data(), g, n, node.shape[0])], vec![]),
        Op::Flatten => (vec![g.to_vec()], vec![]),
        Op::Add => (ins.iter().map(|_| g.to_vec()).collect(), vec![]),
        Op::Concat => {
            let mut out: Vec<Vec<f64>> = ins.iter().map(|t| Vec::with_capacity(t.len())).collect();
            let per_sample = g.len() / n;
            for s in 0..n {
                let mut off = s * per_sample;
                for (t, o) in ins.iter().zip(out.iter_mut()) {
                    let len = t.len() / n;
                    o.extend_from_slice(&g[off..off + len]);
                    off += len;
                }
            }
            (out, vec![])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{zoo, Block, ExitSpec};
    use layer::Padding;

    fn dense_head(inputs: usize, classes: usize) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            name: "head".into(),
            input_shape: [1, 1, inputs],
            width_multiplier: None,
            num_classes: classes,
            blocks: vec![Block {
                name: "classifier".into(),
                layers: vec![
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        units: classes,
                        inputs: Some(inputs),
                    },
                ],
            }],
            exits: vec![],
        }
    }

    #[test]
    fn single_dense_head_outputs_classes() {
        let g = build_graph(&dense_head(2048, 101)).unwrap();
        assert_eq!(g.exits().len(), 1);
        let out = g.forward(&Tensor::filled(&[2048, 1, 1], 0.5)).unwrap();
        assert_eq!(out[0].shape(), &[101]);
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let g = build_graph(&dense_head(16, 5)).unwrap();
        let x = Tensor::from_fn(&[3, 16, 1, 1], |i| (i as f64).sin());
        let out = g.forward(&x).unwrap();
        for v in out[0].data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn mobilenet_graph_has_fourteen_exits() {
        let g = build_graph(&zoo::mobilenet(0.25)).unwrap();
        assert_eq!(g.exits().len(), 14);
        assert!(g.exits().iter().all(|e| g.nodes()[e.node].shape == [101]));
    }

    #[test]
    fn wrong_channel_count_is_shape_mismatch() {
        let mut d = dense_head(4, 2);
        d.input_shape = [6, 6, 1];
        d.blocks.insert(
            0,
            Block {
                name: "conv".into(),
                layers: vec![LayerSpec::Conv2d {
                    filters: 4,
                    kernel: [3, 3],
                    stride: 1,
                    padding: Padding::Same,
                    in_channels: Some(3),
                }],
            },
        );
        let err = build_graph(&d).unwrap_err();
        assert!(
            matches!(err, GraphError::Descriptor(DescriptorError::ShapeMismatch { .. })),
            "{err}"
        );
    }

    #[test]
    fn bad_input_shape_rejected() {
        let g = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        assert!(matches!(
            g.forward(&Tensor::zeros(&[1, 7, 8])),
            Err(GraphError::ShapeMismatch { .. })
        ));
        let mut x = Tensor::zeros(&[1, 8, 8]);
        x.data_mut()[3] = f64::INFINITY;
        assert!(matches!(g.forward(&x), Err(GraphError::NonFinite(_))));
    }

    #[test]
    fn classifier_dense_belongs_to_final_exit() {
        let mut d = dense_head(4, 3);
        d.exits = vec![ExitSpec { block: 1, alpha: 1.0 }];
        let g = build_graph(&d).unwrap();
        let dense = g.nodes().iter().find(|n| matches!(n.op, Op::Dense { .. })).unwrap();
        assert_eq!(dense.role, Role::Head { exit: 0 });
    }

    #[test]
    fn partial_forward_skips_later_layers() {
        let mut g = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        g.init_params(3);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0);
        let full = g.forward(&x).unwrap();
        let (first, evaluated) = g.forward_to_exit(&x, 0).unwrap();
        assert_eq!(first, full[0]);
        assert!(evaluated < g.nodes().len() / 2);
        assert!(matches!(g.forward_to_exit(&x, 9), Err(GraphError::NoSuchExit { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_tape() {
        let mut g = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        g.init_params(1);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f64 * 0.1).cos());
        let trace = g.forward_trace(&x).unwrap();
        let zeros: Vec<Tensor> = g.exits().iter().map(|_| Tensor::zeros(&[2, 4])).collect();
        let tape = g.backward(&trace, &zeros).unwrap();
        assert_eq!(tape.max_abs(), 0.0);
        assert!(tape.input().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_gradient_count() {
        let g = build_graph(&zoo::toy_cnn(8, 4, 2)).unwrap();
        let trace = g.forward_trace(&Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(g.backward(&trace, &[Tensor::zeros(&[4])]).is_err());
        let wrong: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[5])).collect();
        assert!(g.backward(&trace, &wrong).is_err());
    }
}
