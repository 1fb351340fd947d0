//! Builders for the bundled architectures.
//!
//! Batch normalisation and biases are omitted: they carry no multiply-accumulate
//! cost in this accounting. Every backbone ends in a `flatten -> dense(C)` classifier
//! block, so the final exit is that classifier's softmax.

use super::{ArchitectureDescriptor, Block, ExitSpec, DEFAULT_CLASSES};
use crate::graph::layer::{LayerSpec, Padding};

fn conv(filters: usize, k: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel: [k, k],
        stride,
        padding,
        in_channels: None,
    }
}

fn conv_rect(filters: usize, kh: usize, kw: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel: [kh, kw],
        stride: 1,
        padding: Padding::Same,
        in_channels: None,
    }
}

fn pw(filters: usize) -> LayerSpec {
    LayerSpec::PointwiseConv2d { filters, stride: 1 }
}

fn dw(stride: usize) -> LayerSpec {
    LayerSpec::DepthwiseConv2d {
        kernel: [3, 3],
        stride,
        padding: Padding::Same,
    }
}

fn max_pool(k: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::MaxPool {
        size: [k, k],
        stride,
        padding,
    }
}

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units, inputs: None }
}

/// Layers followed by ReLU, as one branch.
fn with_relu(layers: impl IntoIterator<Item = LayerSpec>) -> Vec<LayerSpec> {
    layers.into_iter().flat_map(|l| [l, LayerSpec::Relu]).collect()
}

fn block(name: impl Into<String>, layers: Vec<LayerSpec>) -> Block {
    Block {
        name: name.into(),
        layers,
    }
}

fn classifier(classes: usize) -> Block {
    block("classifier", vec![LayerSpec::Flatten, dense(classes)])
}

/// One exit per block, weight 0 before `first_active` (1-based) and 1 from it.
fn exits_everywhere(blocks: usize, first_active: usize) -> Vec<ExitSpec> {
    (1..=blocks)
        .map(|block| ExitSpec {
            block,
            alpha: if block < first_active { 0.0 } else { 1.0 },
        })
        .collect()
}

/// VGG16 at 224x224 with a 101-way classifier and no early exits.
pub fn vgg16() -> ArchitectureDescriptor {
    let stages = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut blocks: Vec<Block> = stages
        .iter()
        .enumerate()
        .map(|(i, &(filters, convs))| {
            let mut layers = with_relu((0..convs).map(|_| conv(filters, 3, 1, Padding::Same)));
            layers.push(max_pool(2, 2, Padding::Valid));
            block(format!("conv{}", i + 1), layers)
        })
        .collect();
    blocks.push(block(
        "classifier",
        vec![
            LayerSpec::Flatten,
            dense(4096),
            LayerSpec::Relu,
            dense(4096),
            LayerSpec::Relu,
            dense(DEFAULT_CLASSES),
        ],
    ));
    ArchitectureDescriptor {
        name: "vgg16".into(),
        input_shape: [224, 224, 3],
        width_multiplier: None,
        num_classes: DEFAULT_CLASSES,
        blocks,
        exits: vec![],
    }
}

fn bottleneck(filters: usize, stride: usize, project: bool) -> Vec<LayerSpec> {
    let main = vec![
        LayerSpec::PointwiseConv2d { filters, stride },
        LayerSpec::Relu,
        conv(filters, 3, 1, Padding::Same),
        LayerSpec::Relu,
        pw(4 * filters),
    ];
    let shortcut = if project {
        vec![LayerSpec::PointwiseConv2d {
            filters: 4 * filters,
            stride,
        }]
    } else {
        vec![]
    };
    vec![LayerSpec::Residual { main, shortcut }, LayerSpec::Relu]
}

/// ResNet50 at 224x224: stem, 16 bottleneck blocks and the classifier,
/// 18 exits with weights zero below exit 9.
pub fn resnet50() -> ArchitectureDescriptor {
    let mut blocks = vec![block(
        "stem",
        vec![
            conv(64, 7, 2, Padding::Same),
            LayerSpec::Relu,
            max_pool(3, 2, Padding::Same),
        ],
    )];
    let stages = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];
    for (si, &(repeats, filters, stride)) in stages.iter().enumerate() {
        for r in 0..repeats {
            let first = r == 0;
            let layers = bottleneck(filters, if first { stride } else { 1 }, first);
            blocks.push(block(format!("res{}{}", si + 2, (b'a' + r as u8) as char), layers));
        }
    }
    blocks.push(classifier(DEFAULT_CLASSES));
    let exits = exits_everywhere(blocks.len(), 9);
    ArchitectureDescriptor {
        name: "resnet50".into(),
        input_shape: [224, 224, 3],
        width_multiplier: None,
        num_classes: DEFAULT_CLASSES,
        blocks,
        exits,
    }
}

/// MobileNet (v1) at 224x224 with width multiplier `width`: 13 depthwise-separable
/// blocks (the input convolution folded into the first) and the classifier,
/// 14 exits with weights zero below exit 7.
pub fn mobilenet(width: f64) -> ArchitectureDescriptor {
    let plan: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let mut blocks: Vec<Block> = plan
        .iter()
        .enumerate()
        .map(|(i, &(filters, stride))| {
            let mut layers = Vec::new();
            if i == 0 {
                layers.extend(with_relu([conv(32, 3, 2, Padding::Same)]));
            }
            layers.extend(with_relu([dw(stride), pw(filters)]));
            block(format!("dwsep{}", i + 1), layers)
        })
        .collect();
    blocks.push(classifier(DEFAULT_CLASSES));
    let exits = exits_everywhere(blocks.len(), 7);
    ArchitectureDescriptor {
        name: format!("mobilenet_{width:?}"),
        input_shape: [224, 224, 3],
        width_multiplier: Some(width),
        num_classes: DEFAULT_CLASSES,
        blocks,
        exits,
    }
}

fn avg_pool_3x3() -> LayerSpec {
    LayerSpec::AvgPool {
        size: [3, 3],
        stride: 1,
        padding: Padding::Same,
    }
}

fn inception_a(pool_filters: usize) -> LayerSpec {
    LayerSpec::Concat {
        branches: vec![
            with_relu([pw(64)]),
            with_relu([pw(48), conv(64, 5, 1, Padding::Same)]),
            with_relu([pw(64), conv(96, 3, 1, Padding::Same), conv(96, 3, 1, Padding::Same)]),
            [vec![avg_pool_3x3()], with_relu([pw(pool_filters)])].concat(),
        ],
    }
}

fn inception_reduce_a() -> LayerSpec {
    LayerSpec::Concat {
        branches: vec![
            with_relu([conv(384, 3, 2, Padding::Valid)]),
            with_relu([pw(64), conv(96, 3, 1, Padding::Same), conv(96, 3, 2, Padding::Valid)]),
            vec![max_pool(3, 2, Padding::Valid)],
        ],
    }
}

fn inception_c(n: usize) -> LayerSpec {
    LayerSpec::Concat {
        branches: vec![
            with_relu([pw(192)]),
            with_relu([pw(n), conv_rect(n, 1, 7), conv_rect(192, 7, 1)]),
            with_relu([
                pw(n),
                conv_rect(n, 7, 1),
                conv_rect(n, 1, 7),
                conv_rect(n, 7, 1),
                conv_rect(192, 1, 7),
            ]),
            [vec![avg_pool_3x3()], with_relu([pw(192)])].concat(),
        ],
    }
}

fn inception_reduce_b() -> LayerSpec {
    LayerSpec::Concat {
        branches: vec![
            with_relu([pw(192), conv(320, 3, 2, Padding::Valid)]),
            with_relu([
                pw(192),
                conv_rect(192, 1, 7),
                conv_rect(192, 7, 1),
                conv(192, 3, 2, Padding::Valid),
            ]),
            vec![max_pool(3, 2, Padding::Valid)],
        ],
    }
}

fn split_1x3_3x1() -> LayerSpec {
    LayerSpec::Concat {
        branches: vec![with_relu([conv_rect(384, 1, 3)]), with_relu([conv_rect(384, 3, 1)])],
    }
}

fn inception_e() -> LayerSpec {
    LayerSpec::Concat {
        branches: vec![
            with_relu([pw(320)]),
            [with_relu([pw(384)]), vec![split_1x3_3x1()]].concat(),
            [
                with_relu([pw(448), conv(384, 3, 1, Padding::Same)]),
                vec![split_1x3_3x1()],
            ]
            .concat(),
            [vec![avg_pool_3x3()], with_relu([pw(192)])].concat(),
        ],
    }
}

/// Inception-V3 at 224x224: stem, the 11 mixed blocks and the classifier,
/// 13 exits with weights zero below exit 6.
pub fn inceptionv3() -> ArchitectureDescriptor {
    let mut stem = with_relu([
        conv(32, 3, 2, Padding::Valid),
        conv(32, 3, 1, Padding::Valid),
        conv(64, 3, 1, Padding::Same),
    ]);
    stem.push(max_pool(3, 2, Padding::Valid));
    stem.extend(with_relu([
        conv(80, 1, 1, Padding::Valid),
        conv(192, 3, 1, Padding::Valid),
    ]));
    stem.push(max_pool(3, 2, Padding::Valid));

    let mixed = [
        inception_a(32),
        inception_a(64),
        inception_a(64),
        inception_reduce_a(),
        inception_c(128),
        inception_c(160),
        inception_c(160),
        inception_c(192),
        inception_reduce_b(),
        inception_e(),
        inception_e(),
    ];
    let mut blocks = vec![block("stem", stem)];
    blocks.extend(
        mixed
            .into_iter()
            .enumerate()
            .map(|(i, layer)| block(format!("mixed{i}"), vec![layer])),
    );
    blocks.push(classifier(DEFAULT_CLASSES));
    let exits = exits_everywhere(blocks.len(), 6);
    ArchitectureDescriptor {
        name: "inceptionv3".into(),
        input_shape: [224, 224, 3],
        width_multiplier: None,
        num_classes: DEFAULT_CLASSES,
        blocks,
        exits,
    }
}

/// Three-block CNN for `side x side` single-channel images, one exit per
/// block, weights zero below `first_active`.
pub fn toy_cnn(side: usize, classes: usize, first_active: usize) -> ArchitectureDescriptor {
    let stage = |filters, pool: bool| {
        let mut layers = with_relu([conv(filters, 3, 1, Padding::Same)]);
        if pool {
            layers.push(max_pool(2, 2, Padding::Valid));
        }
        layers
    };
    ArchitectureDescriptor {
        name: "toy_cnn".into(),
        input_shape: [side, side, 1],
        width_multiplier: None,
        num_classes: classes,
        blocks: vec![
            block("b1", stage(8, true)),
            block("b2", stage(16, true)),
            block("b3", stage(32, false)),
        ],
        exits: exits_everywhere(3, first_active),
    }
}

/// Every bundled descriptor, keyed by its file stem.
pub fn bundled() -> Vec<(&'static str, ArchitectureDescriptor)> {
    vec![
        ("vgg16", vgg16()),
        ("resnet50", resnet50()),
        ("mobilenet_1.0", mobilenet(1.0)),
        ("mobilenet_0.75", mobilenet(0.75)),
        ("mobilenet_0.5", mobilenet(0.5)),
        ("mobilenet_0.25", mobilenet(0.25)),
        ("inceptionv3", inceptionv3()),
        ("toy_cnn", toy_cnn(8, 4, 2)),
    ]
}

/// A bundled descriptor by file stem (`"resnet50"`, `"mobilenet_0.5"`, ...).
pub fn by_name(name: &str) -> Option<ArchitectureDescriptor> {
    let stem = name.trim_end_matches(".json");
    let stem = stem.rsplit(['/', '\\']).next().unwrap_or(stem);
    bundled().into_iter().find(|(n, _)| *n == stem).map(|(_, d)| d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_descriptor_validates() {
        for (name, d) in bundled() {
            d.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn published_exit_counts() {
        assert_eq!(resnet50().exits.len(), 18);
        assert_eq!(mobilenet(1.0).exits.len(), 14);
        assert_eq!(inceptionv3().exits.len(), 13);
        assert_eq!(resnet50().exits.iter().filter(|e| e.alpha == 0.0).count(), 8);
        assert_eq!(mobilenet(0.5).exits.iter().filter(|e| e.alpha == 0.0).count(), 6);
        assert_eq!(inceptionv3().exits.iter().filter(|e| e.alpha == 0.0).count(), 5);
    }

    #[test]
    fn final_feature_maps() {
        let r = resnet50().validate().unwrap();
        assert_eq!(r.blocks[16], vec![2048, 7, 7]);
        let m = mobilenet(0.25).validate().unwrap();
        assert_eq!(m.blocks[12], vec![256, 7, 7]);
        let i = inceptionv3().validate().unwrap();
        assert_eq!(i.blocks[0], vec![192, 25, 25]);
        assert_eq!(i.blocks[11], vec![2048, 5, 5]);
        let v = vgg16().validate().unwrap();
        assert_eq!(v.blocks[4], vec![512, 7, 7]);
    }

    #[test]
    fn lookup_by_file_name() {
        assert_eq!(by_name("descriptors/mobilenet_0.75.json").unwrap(), mobilenet(0.75));
        assert!(by_name("alexnet").is_none());
    }
}
