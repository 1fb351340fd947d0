//! Analytic compute accounting.
//!
//! Costs are multiply-accumulates (one MAC counts as one FLOP). Convolutions
//! cost `out_h * out_w * out_c * k_h * k_w * in_c`, depthwise convolutions
//! `out_h * out_w * c * k_h * k_w`, dense layers `in * out`. Pooling,
//! activations, softmax, residual adds and concatenation are free.
//!
//! [`MacConvention::SkipDepthwise`] drops the depthwise term. Some published
//! MobileNet tables were produced by counters that do the same; it is the only
//! way to compare against them.

use std::fmt::Write as _;

use crate::arch::{layer_location, mismatch, ArchitectureDescriptor, DescriptorError};
use crate::graph::layer::{LayerSpec, ShapeIssue};
use crate::graph::{Graph, Op};

/// Which layers contribute MACs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MacConvention {
    /// Convolutions (including depthwise) and dense layers.
    #[default]
    Full,
    /// As `Full`, but depthwise convolutions are free.
    SkipDepthwise,
}

impl MacConvention {
    /// `#` comment line written above every CSV table.
    pub fn csv_header(self) -> &'static str {
        match self {
            Self::Full => CSV_CONVENTION,
            Self::SkipDepthwise => {
                "# cost unit: multiply-accumulates (1 MAC = 1 FLOP); conv and dense only, depthwise conv skipped; exit head included"
            }
        }
    }
}

/// Header line written above every CSV table under [`MacConvention::Full`].
pub const CSV_CONVENTION: &str =
    "# cost unit: multiply-accumulates (1 MAC = 1 FLOP); conv and dense only; exit head included";

/// MACs of one layer on a per-sample input shape. Composite layers sum
/// over all their branches.
pub fn count_macs(layer: &LayerSpec, input: &[usize], width: f64) -> Result<u64, ShapeIssue> {
    count_macs_with(layer, input, width, MacConvention::Full)
}

pub fn count_macs_with(
    layer: &LayerSpec,
    input: &[usize],
    width: f64,
    convention: MacConvention,
) -> Result<u64, ShapeIssue> {
    layer.output_shape(input, width)?;
    let macs = match layer {
        LayerSpec::Dense { units, .. } => (input[0] * units) as u64,
        LayerSpec::DepthwiseConv2d { .. } if convention == MacConvention::SkipDepthwise => 0,
        LayerSpec::Conv2d { .. } | LayerSpec::PointwiseConv2d { .. } | LayerSpec::DepthwiseConv2d { .. } => {
            let w = layer.window(input, width)?.expect("conv layers have a window");
            window_macs(layer, w.in_c, w.out_c * w.out_h * w.out_w, w.kh * w.kw)
        }
        LayerSpec::Residual { main, shortcut } => {
            chain_macs(main, input, width, convention)? + chain_macs(shortcut, input, width, convention)?
        }
        LayerSpec::Concat { branches } => branches
            .iter()
            .map(|b| chain_macs(b, input, width, convention))
            .sum::<Result<u64, _>>()?,
        _ => 0,
    };
    Ok(macs)
}

fn window_macs(layer: &LayerSpec, in_c: usize, outputs: usize, taps: usize) -> u64 {
    let per_output = match layer {
        LayerSpec::DepthwiseConv2d { .. } => taps,
        _ => taps * in_c,
    };
    (outputs * per_output) as u64
}

fn chain_macs(layers: &[LayerSpec], input: &[usize], width: f64, convention: MacConvention) -> Result<u64, ShapeIssue> {
    let mut shape = input.to_vec();
    let mut total = 0;
    for l in layers {
        total += count_macs_with(l, &shape, width, convention)?;
        shape = l.output_shape(&shape, width)?;
    }
    Ok(total)
}

/// MACs of a resolved graph node.
pub fn op_macs(op: &Op) -> u64 {
    match op {
        Op::Dense { inputs, units } => (inputs * units) as u64,
        Op::Conv2d(g) => (g.out_h * g.out_w * g.out_c * g.kh * g.kw * g.in_c) as u64,
        Op::DepthwiseConv2d(g) => (g.out_h * g.out_w * g.in_c * g.kh * g.kw) as u64,
        _ => 0,
    }
}

/// Sum of node MACs over the subgraph an exit depends on.
pub fn graph_exit_macs(graph: &Graph, exit: usize) -> u64 {
    let needed = graph.ancestors(graph.exits()[exit].node);
    graph
        .nodes()
        .iter()
        .zip(needed)
        .filter(|(_, n)| *n)
        .map(|(node, _)| op_macs(&node.op))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    /// Human-readable location, e.g. `block 2 (conv2) layer 0 (conv2d)`.
    pub id: String,
    /// 0-based block.
    pub block: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitCost {
    /// 1-based exit index.
    pub exit: usize,
    /// 1-based block the exit reads from.
    pub block: usize,
    pub head_macs: u64,
    pub cumulative_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsTable {
    pub name: String,
    pub convention: MacConvention,
    pub per_layer: Vec<LayerCost>,
    pub per_block: Vec<u64>,
    pub cumulative_at_exit: Vec<ExitCost>,
}

impl FlopsTable {
    /// Trunk MACs of blocks `1..=block`.
    pub fn trunk_prefix(&self, block: usize) -> u64 {
        self.per_block[..block].iter().sum()
    }

    pub fn trunk_total(&self) -> u64 {
        self.per_block.iter().sum()
    }

    /// Cumulative cost of the final exit.
    pub fn total(&self) -> u64 {
        self.cumulative_at_exit.last().map_or(0, |e| e.cumulative_macs)
    }

    /// Cumulative cost of exit `p` (1-based).
    pub fn at_exit(&self, p: usize) -> Option<u64> {
        self.cumulative_at_exit
            .get(p.checked_sub(1)?)
            .map(|e| e.cumulative_macs)
    }
}

pub fn flops_table(desc: &ArchitectureDescriptor) -> Result<FlopsTable, DescriptorError> {
    flops_table_with(desc, MacConvention::Full)
}

pub fn flops_table_with(
    desc: &ArchitectureDescriptor,
    convention: MacConvention,
) -> Result<FlopsTable, DescriptorError> {
    let shapes = desc.validate()?;
    let width = desc.width();
    let mut per_layer = Vec::new();
    let mut per_block = Vec::with_capacity(desc.blocks.len());
    let mut shape = shapes.input.clone();
    for (bi, block) in desc.blocks.iter().enumerate() {
        let mut block_total = 0;
        for (li, spec) in block.layers.iter().enumerate() {
            let at = || layer_location(bi, &block.name, li, spec);
            let macs = count_macs_with(spec, &shape, width, convention).map_err(|e| mismatch(at(), e))?;
            shape = spec.output_shape(&shape, width).map_err(|e| mismatch(at(), e))?;
            per_layer.push(LayerCost {
                id: at(),
                block: bi,
                macs,
            });
            block_total += macs;
        }
        per_block.push(block_total);
    }
    let mut cumulative_at_exit = Vec::new();
    for (i, e) in desc.effective_exits().iter().enumerate() {
        let features = &shapes.blocks[e.block - 1];
        let head = desc.head_layers(e.block - 1, features);
        let head_macs = chain_macs(&head, features, 1.0, convention)
            .map_err(|issue| mismatch(format!("exit head on block {}", e.block), issue))?;
        let trunk: u64 = per_block[..e.block].iter().sum();
        cumulative_at_exit.push(ExitCost {
            exit: i + 1,
            block: e.block,
            head_macs,
            cumulative_macs: trunk + head_macs,
        });
    }
    Ok(FlopsTable {
        name: desc.name.clone(),
        convention,
        per_layer,
        per_block,
        cumulative_at_exit,
    })
}

/// Percent decrease of each exit's cumulative cost against `reference_total`.
pub fn delta_vs_reference(table: &FlopsTable, reference_total: u64) -> Vec<(usize, f64)> {
    assert!(reference_total > 0, "reference cost must be positive");
    table
        .cumulative_at_exit
        .iter()
        .map(|e| {
            (
                e.exit,
                100.0 * (1.0 - e.cumulative_macs as f64 / reference_total as f64),
            )
        })
        .collect()
}

/// CSV with columns `exit_index,cumulative_macs,delta_vs_reference_pct`,
/// preceded by a `#` comment documenting the counting convention. The delta
/// column is empty without a reference.
pub fn to_csv(table: &FlopsTable, reference_total: Option<u64>) -> String {
    let deltas = reference_total.map(|r| delta_vs_reference(table, r));
    let mut out = String::new();
    writeln!(out, "{}", table.convention.csv_header()).unwrap();
    writeln!(out, "exit_index,cumulative_macs,delta_vs_reference_pct").unwrap();
    for (i, e) in table.cumulative_at_exit.iter().enumerate() {
        let delta = deltas.as_ref().map_or(String::new(), |d| format!("{:.4}", d[i].1));
        writeln!(out, "{},{},{}", e.exit, e.cumulative_macs, delta).unwrap();
    }
    out
}

/// Gnuplot script drawing cumulative cost per exit from a CSV written by
/// [`to_csv`], one line per file.
pub fn gnuplot_script(csv_files: &[(&str, &str)], output_png: &str) -> String {
    let mut s = String::new();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set datafile commentschars '#'").unwrap();
    writeln!(s, "set key autotitle columnhead left top").unwrap();
    writeln!(s, "set terminal pngcairo size 800,500").unwrap();
    writeln!(s, "set output '{output_png}'").unwrap();
    writeln!(s, "set xlabel 'exit'").unwrap();
    writeln!(s, "set ylabel 'cumulative MACs'").unwrap();
    writeln!(s, "set logscale y").unwrap();
    let plots: Vec<String> = csv_files
        .iter()
        .map(|(file, title)| format!("'{file}' using 1:2 with linespoints title '{title}'"))
        .collect();
    writeln!(s, "plot {}", plots.join(", \\\n     ")).unwrap();
    s
}
