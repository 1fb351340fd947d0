//! Architecture descriptors: the declarative network description that drives
//! graph construction, MAC accounting and exit placement.
//!
//! JSON layout:
//!
//! ```json
//! {
//!   "name": "toy",
//!   "input_shape": [8, 8, 1],
//!   "width_multiplier": 1.0,
//!   "num_classes": 4,
//!   "blocks": [{"name": "b1", "layers": [{"kind": "conv2d", "filters": 8, "kernel": [3, 3]}]}],
//!   "exits": [{"block": 1, "alpha": 1.0}]
//! }
//! ```
//!
//! `input_shape` is `[h, w, c]`; tensors fed to the graph are `[n, c, h, w]`.
//! Exit `block` indices are 1-based block boundaries. An empty `exits` list
//! means a single exit on the last block (the plain, non-elastic network).

pub mod zoo;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::layer::{chain_shape, LayerSpec, ShapeIssue};

pub const DEFAULT_CLASSES: usize = 101;
pub const WIDTH_MULTIPLIERS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("shape mismatch at {at}: expected {expected}, got {got:?}")]
    ShapeMismatch {
        at: String,
        expected: String,
        got: Vec<usize>,
    },
    #[error("invalid layer at {at}: {reason}")]
    InvalidLayer { at: String, reason: String },
    #[error("width multiplier {0} is not one of 0.25, 0.5, 0.75, 1.0")]
    WidthMultiplier(f64),
    #[error("exit placement {index} names no block (descriptor has {blocks} blocks)")]
    UnknownBlock { index: usize, blocks: usize },
    #[error("invalid exit schedule: {0}")]
    InvalidSchedule(String),
    #[error("descriptor has no blocks")]
    Empty,
    #[error("descriptor JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading descriptor: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitSpec {
    /// 1-based index of the block whose output feeds this exit.
    pub block: usize,
    /// Loss weight of this exit.
    pub alpha: f64,
}

/// Shape of the classifier attached at each exit.
///
/// On a feature map the head is `global_avg_pool -> dense(C) -> softmax`.
/// On a block that already ends in `dense(C)` (a classifier block) the head
/// is only the softmax, and that dense layer becomes the exit's output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitHeadSpec {
    pub classes: usize,
}

impl Default for ExitHeadSpec {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES,
        }
    }
}

impl ExitHeadSpec {
    pub fn new(classes: usize) -> Self {
        Self { classes }
    }

    /// Layers appended after a block with output shape `features`.
    pub fn layers_for(&self, features: &[usize], block_is_classifier: bool) -> Vec<LayerSpec> {
        let dense = LayerSpec::Dense {
            units: self.classes,
            inputs: None,
        };
        match (features.len(), block_is_classifier) {
            (1, true) => vec![LayerSpec::Softmax],
            (1, false) => vec![dense, LayerSpec::Softmax],
            _ => vec![LayerSpec::GlobalAvgPool, dense, LayerSpec::Softmax],
        }
    }
}

fn default_classes() -> usize {
    DEFAULT_CLASSES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub name: String,
    /// `[h, w, c]`.
    pub input_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_multiplier: Option<f64>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub blocks: Vec<Block>,
    #[serde(default)]
    pub exits: Vec<ExitSpec>,
}

/// Per-block output shapes of a validated descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedShapes {
    pub input: Vec<usize>,
    pub blocks: Vec<Vec<usize>>,
}

impl ArchitectureDescriptor {
    pub fn from_json(text: &str) -> Result<Self, DescriptorError> {
        let desc: Self = serde_json::from_str(text)?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DescriptorError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn width(&self) -> f64 {
        self.width_multiplier.unwrap_or(1.0)
    }

    pub fn head(&self) -> ExitHeadSpec {
        ExitHeadSpec::new(self.num_classes)
    }

    /// Per-sample input tensor shape `[c, h, w]`.
    pub fn input_chw(&self) -> Vec<usize> {
        let [h, w, c] = self.input_shape;
        vec![c, h, w]
    }

    /// Exits in pipeline order; an empty list means one exit on the last block.
    pub fn effective_exits(&self) -> Vec<ExitSpec> {
        if self.exits.is_empty() {
            vec![ExitSpec {
                block: self.blocks.len(),
                alpha: 1.0,
            }]
        } else {
            self.exits.clone()
        }
    }

    /// True when the block ends with a dense layer producing the class logits.
    pub fn is_classifier_block(&self, block: usize) -> bool {
        matches!(
            self.blocks[block].layers.last(),
            Some(LayerSpec::Dense { units, .. }) if *units == self.num_classes
        )
    }

    /// Head layers for an exit on 0-based `block` with output `features`.
    pub fn head_layers(&self, block: usize, features: &[usize]) -> Vec<LayerSpec> {
        self.head().layers_for(features, self.is_classifier_block(block))
    }

    /// Checks parameters, shape chaining and exit placements.
    pub fn validate(&self) -> Result<ResolvedShapes, DescriptorError> {
        if let Some(w) = self.width_multiplier {
            if !WIDTH_MULTIPLIERS.contains(&w) {
                return Err(DescriptorError::WidthMultiplier(w));
            }
        }
        if self.blocks.is_empty() {
            return Err(DescriptorError::Empty);
        }
        if self.input_shape.contains(&0) || self.num_classes == 0 {
            return Err(DescriptorError::InvalidLayer {
                at: "descriptor".into(),
                reason: "input_shape and num_classes must be positive".into(),
            });
        }
        let width = self.width();
        let input = self.input_chw();
        let mut shape = input.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.layers.iter().enumerate() {
                let at = || layer_location(bi, &block.name, li, layer);
                layer
                    .validate_params()
                    .map_err(|reason| DescriptorError::InvalidLayer { at: at(), reason })?;
                shape = layer
                    .output_shape(&shape, width)
                    .map_err(|issue| mismatch(at(), issue))?;
            }
            blocks.push(shape.clone());
        }
        self.validate_exits(&blocks)?;
        Ok(ResolvedShapes { input, blocks })
    }

    fn validate_exits(&self, block_shapes: &[Vec<usize>]) -> Result<(), DescriptorError> {
        let exits = self.effective_exits();
        let count = self.blocks.len();
        let mut prev = 0;
        for e in &exits {
            if e.block == 0 || e.block > count {
                return Err(DescriptorError::UnknownBlock {
                    index: e.block,
                    blocks: count,
                });
            }
            if e.block <= prev {
                return Err(DescriptorError::InvalidSchedule(
                    "exit placements must be strictly increasing".into(),
                ));
            }
            if !(e.alpha.is_finite() && e.alpha >= 0.0) {
                return Err(DescriptorError::InvalidSchedule(format!(
                    "exit weight {} must be finite and >= 0",
                    e.alpha
                )));
            }
            prev = e.block;
            let head = self.head_layers(e.block - 1, &block_shapes[e.block - 1]);
            chain_shape(&head, &block_shapes[e.block - 1], 1.0)
                .map_err(|issue| mismatch(format!("exit head on block {}", e.block), issue))?;
        }
        if prev != count {
            return Err(DescriptorError::InvalidSchedule(format!(
                "the last exit must sit on the final block {count}, found {prev}"
            )));
        }
        if !exits.iter().any(|e| e.alpha > 0.0) {
            return Err(DescriptorError::InvalidSchedule(
                "at least one exit weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn layer_location(block: usize, name: &str, layer: usize, spec: &LayerSpec) -> String {
    format!("block {} ({name}) layer {layer} ({})", block + 1, spec.kind_name())
}

pub(crate) fn mismatch(at: String, issue: ShapeIssue) -> DescriptorError {
    DescriptorError::ShapeMismatch {
        at,
        expected: issue.expected,
        got: issue.got,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::layer::Padding;

    fn small() -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            name: "small".into(),
            input_shape: [4, 4, 1],
            width_multiplier: None,
            num_classes: 3,
            blocks: vec![
                Block {
                    name: "b1".into(),
                    layers: vec![
                        LayerSpec::Conv2d {
                            filters: 2,
                            kernel: [3, 3],
                            stride: 1,
                            padding: Padding::Same,
                            in_channels: Some(1),
                        },
                        LayerSpec::Relu,
                    ],
                },
                Block {
                    name: "b2".into(),
                    layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3, inputs: None }],
                },
            ],
            exits: vec![],
        }
    }

    #[test]
    fn validates_and_resolves() {
        let shapes = small().validate().unwrap();
        assert_eq!(shapes.input, vec![1, 4, 4]);
        assert_eq!(shapes.blocks, vec![vec![2, 4, 4], vec![3]]);
    }

    #[test]
    fn classifier_block_gets_softmax_only_head() {
        let d = small();
        assert!(d.is_classifier_block(1));
        assert_eq!(d.head_layers(1, &[3]), vec![LayerSpec::Softmax]);
        assert_eq!(d.head_layers(0, &[2, 4, 4]).len(), 3);
    }

    #[test]
    fn channel_mismatch_names_the_layer() {
        let mut d = small();
        d.input_shape = [4, 4, 3];
        match d.validate().unwrap_err() {
            DescriptorError::ShapeMismatch { at, got, .. } => {
                assert!(at.starts_with("block 1 (b1) layer 0"), "{at}");
                assert_eq!(got, vec![3, 4, 4]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn exit_rules() {
        let mut d = small();
        d.exits = vec![ExitSpec { block: 3, alpha: 1.0 }];
        assert!(matches!(
            d.validate(),
            Err(DescriptorError::UnknownBlock { index: 3, .. })
        ));
        d.exits = vec![ExitSpec { block: 1, alpha: 1.0 }];
        assert!(matches!(d.validate(), Err(DescriptorError::InvalidSchedule(_))));
        d.exits = vec![ExitSpec { block: 1, alpha: 0.0 }, ExitSpec { block: 2, alpha: 0.0 }];
        assert!(matches!(d.validate(), Err(DescriptorError::InvalidSchedule(_))));
        d.exits = vec![ExitSpec { block: 1, alpha: 0.0 }, ExitSpec { block: 2, alpha: 1.0 }];
        assert!(d.validate().is_ok());
    }

    #[test]
    fn width_multiplier_restricted() {
        let mut d = small();
        d.width_multiplier = Some(0.6);
        assert!(matches!(d.validate(), Err(DescriptorError::WidthMultiplier(_))));
    }

    #[test]
    fn json_round_trip() {
        let d = small();
        let back = ArchitectureDescriptor::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
    }
}
