//! Declarative layer descriptions and their shape algebra.
//!
//! Per-sample shapes are `[c, h, w]` for feature maps and `[d]` for vectors.
//! The batch dimension is never part of a [`LayerSpec`] shape.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`, zero padding split with the
    /// extra row/column at the bottom/right.
    #[default]
    Same,
    /// No padding: `floor((in - k) / stride) + 1`.
    Valid,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_same(p: &Padding) -> bool {
    *p == Padding::Same
}

/// One layer of an architecture descriptor.
///
/// `residual` and `concat` are composite: they expand to parallel branches
/// joined by an elementwise add or a channel concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        /// Expected input width; checked when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<usize>,
    },
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "is_same")]
        padding: Padding,
        /// Expected input channels; checked when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_channels: Option<usize>,
    },
    DepthwiseConv2d {
        kernel: [usize; 2],
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "is_same")]
        padding: Padding,
    },
    /// 1x1 convolution.
    PointwiseConv2d {
        filters: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
    },
    MaxPool {
        size: [usize; 2],
        stride: usize,
        #[serde(default, skip_serializing_if = "is_same")]
        padding: Padding,
    },
    AvgPool {
        size: [usize; 2],
        stride: usize,
        #[serde(default, skip_serializing_if = "is_same")]
        padding: Padding,
    },
    GlobalAvgPool,
    Relu,
    Softmax,
    Flatten,
    /// `main(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        main: Vec<LayerSpec>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        shortcut: Vec<LayerSpec>,
    },
    /// Channel concatenation of parallel branches, in branch order.
    Concat {
        branches: Vec<Vec<LayerSpec>>,
    },
}

/// Why a layer rejected its input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeIssue {
    pub expected: String,
    pub got: Vec<usize>,
}

impl ShapeIssue {
    fn new(expected: impl Into<String>, got: &[usize]) -> Self {
        Self {
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}

/// Channel count after applying a width multiplier.
pub fn scaled_channels(filters: usize, width: f64) -> usize {
    ((filters as f64 * width) + 1e-9).floor().max(1.0) as usize
}

/// Output length of one spatial axis.
pub fn spatial_out(input: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= k).then(|| (input - k) / stride + 1),
    }
}

/// Leading (top/left) padding for one axis.
pub fn pad_before(input: usize, out: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => ((out - 1) * stride + k).saturating_sub(input) / 2,
    }
}

/// Resolved geometry of a sliding-window layer on a concrete input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn resolve(
        input: &[usize],
        out_c: Option<usize>,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, ShapeIssue> {
        let [c, h, w] = match input {
            &[c, h, w] => [c, h, w],
            _ => return Err(ShapeIssue::new("a [c, h, w] feature map", input)),
        };
        let [kh, kw] = kernel;
        let oh = spatial_out(h, kh, stride, padding);
        let ow = spatial_out(w, kw, stride, padding);
        let (Some(out_h), Some(out_w)) = (oh, ow) else {
            return Err(ShapeIssue::new(
                format!("spatial size >= kernel {kh}x{kw} for valid padding"),
                input,
            ));
        };
        Ok(Self {
            in_c: c,
            in_h: h,
            in_w: w,
            out_c: out_c.unwrap_or(c),
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad_top: pad_before(h, out_h, kh, stride, padding),
            pad_left: pad_before(w, out_w, kw, stride, padding),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.out_h, self.out_w]
    }
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "dense",
            Self::Conv2d { .. } => "conv2d",
            Self::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Self::PointwiseConv2d { .. } => "pointwise_conv2d",
            Self::MaxPool { .. } => "max_pool",
            Self::AvgPool { .. } => "avg_pool",
            Self::GlobalAvgPool => "global_avg_pool",
            Self::Relu => "relu",
            Self::Softmax => "softmax",
            Self::Flatten => "flatten",
            Self::Residual { .. } => "residual",
            Self::Concat { .. } => "concat",
        }
    }

    pub fn is_composite(&self) -> bool {
        matches!(self, Self::Residual { .. } | Self::Concat { .. })
    }

    pub fn validate_params(&self) -> Result<(), String> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(format!("{}: {name} must be >= 1", self.kind_name()))
            } else {
                Ok(())
            }
        };
        match self {
            Self::Dense { units, .. } => positive("units", *units),
            Self::Conv2d {
                filters,
                kernel,
                stride,
                ..
            } => {
                positive("filters", *filters)?;
                positive("kernel height", kernel[0])?;
                positive("kernel width", kernel[1])?;
                positive("stride", *stride)
            }
            Self::DepthwiseConv2d { kernel, stride, .. } => {
                positive("kernel height", kernel[0])?;
                positive("kernel width", kernel[1])?;
                positive("stride", *stride)
            }
            Self::PointwiseConv2d { filters, stride } => {
                positive("filters", *filters)?;
                positive("stride", *stride)
            }
            Self::MaxPool { size, stride, .. } | Self::AvgPool { size, stride, .. } => {
                positive("pool height", size[0])?;
                positive("pool width", size[1])?;
                positive("stride", *stride)
            }
            Self::Residual { main, shortcut } => {
                if main.is_empty() {
                    return Err("residual: main branch is empty".into());
                }
                main.iter().chain(shortcut).try_for_each(Self::validate_params)
            }
            Self::Concat { branches } => {
                if branches.is_empty() || branches.iter().any(Vec::is_empty) {
                    return Err("concat: every branch needs at least one layer".into());
                }
                branches.iter().flatten().try_for_each(Self::validate_params)
            }
            Self::GlobalAvgPool | Self::Relu | Self::Softmax | Self::Flatten => Ok(()),
        }
    }

    /// Sliding-window geometry for convolution and pooling layers.
    pub fn window(&self, input: &[usize], width: f64) -> Result<Option<Window>, ShapeIssue> {
        let w = match *self {
            Self::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                in_channels,
            } => {
                if let (Some(want), Some(&got)) = (in_channels, input.first()) {
                    if want != got || input.len() != 3 {
                        return Err(ShapeIssue::new(format!("[{want}, h, w] (conv2d in_channels)"), input));
                    }
                }
                let out = scaled_channels(filters, width);
                Window::resolve(input, Some(out), kernel, stride, padding)?
            }
            Self::PointwiseConv2d { filters, stride } => {
                let out = scaled_channels(filters, width);
                Window::resolve(input, Some(out), [1, 1], stride, Padding::Same)?
            }
            Self::DepthwiseConv2d {
                kernel,
                stride,
                padding,
            } => Window::resolve(input, None, kernel, stride, padding)?,
            Self::MaxPool { size, stride, padding } | Self::AvgPool { size, stride, padding } => {
                Window::resolve(input, None, size, stride, padding)?
            }
            _ => return Ok(None),
        };
        Ok(Some(w))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize], width: f64) -> Result<Vec<usize>, ShapeIssue> {
        if let Some(w) = self.window(input, width)? {
            return Ok(w.out_shape());
        }
        match self {
            Self::Dense { units, inputs } => match (input, inputs) {
                (&[d], Some(want)) if d != *want => Err(ShapeIssue::new(format!("[{want}] (dense inputs)"), input)),
                (&[_], _) => Ok(vec![*units]),
                _ => Err(ShapeIssue::new(
                    "a flat [d] vector (insert flatten or global_avg_pool)",
                    input,
                )),
            },
            Self::GlobalAvgPool => match input {
                &[c, _, _] => Ok(vec![c]),
                _ => Err(ShapeIssue::new("a [c, h, w] feature map", input)),
            },
            Self::Relu => Ok(input.to_vec()),
            Self::Softmax => match input {
                &[d] => Ok(vec![d]),
                _ => Err(ShapeIssue::new("a flat [d] vector", input)),
            },
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Residual { main, shortcut } => {
                let a = chain_shape(main, input, width)?;
                let b = chain_shape(shortcut, input, width)?;
                if a != b {
                    return Err(ShapeIssue::new(
                        format!("residual branches to agree (main gives {a:?})"),
                        &b,
                    ));
                }
                Ok(a)
            }
            Self::Concat { branches } => {
                let mut channels = 0;
                let mut spatial: Option<Vec<usize>> = None;
                for branch in branches {
                    let s = chain_shape(branch, input, width)?;
                    if s.len() != 3 {
                        return Err(ShapeIssue::new("concat branches to produce [c, h, w]", &s));
                    }
                    match &spatial {
                        Some(hw) if hw[..] != s[1..] => {
                            return Err(ShapeIssue::new(format!("concat branches with spatial size {hw:?}"), &s))
                        }
                        _ => spatial = Some(s[1..].to_vec()),
                    }
                    channels += s[0];
                }
                let hw = spatial.expect("concat has at least one branch");
                Ok(vec![channels, hw[0], hw[1]])
            }
            _ => unreachable!("windowed layers handled above"),
        }
    }
}

/// Shape after applying `layers` in sequence. An empty chain is the identity.
pub fn chain_shape(layers: &[LayerSpec], input: &[usize], width: f64) -> Result<Vec<usize>, ShapeIssue> {
    layers
        .iter()
        .try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape, width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn json_round_trip_of_composites() {
        let layer = LayerSpec::Residual {
            main: vec![LayerSpec::PointwiseConv2d { filters: 8, stride: 2 }, LayerSpec::Relu],
            shortcut: vec![LayerSpec::PointwiseConv2d { filters: 8, stride: 2 }],
        };
        let text = serde_json::to_string(&layer).unwrap();
        assert!(text.contains("\"kind\":\"residual\""));
        let back: LayerSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn defaults_fill_in() {
        let layer: LayerSpec = serde_json::from_str(r#"{"kind":"conv2d","filters":4,"kernel":[3,3]}"#).unwrap();
        assert_eq!(
            layer,
            LayerSpec::Conv2d {
                filters: 4,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Same,
                in_channels: None
            }
        );
    }

    #[test]
    fn in_channel_mismatch_is_reported() {
        let layer = LayerSpec::Conv2d {
            filters: 4,
            kernel: [3, 3],
            stride: 1,
            padding: Padding::Same,
            in_channels: Some(3),
        };
        let issue = layer.output_shape(&[1, 8, 8], 1.0).unwrap_err();
        assert_eq!(issue.got, vec![1, 8, 8]);
    }

    #[test]
    fn dense_needs_flat_input() {
        let layer = LayerSpec::Dense { units: 3, inputs: None };
        assert!(layer.output_shape(&[2, 4, 4], 1.0).is_err());
        assert_eq!(layer.output_shape(&[32], 1.0).unwrap(), vec![3]);
    }

    #[test]
    fn width_multiplier_scales_filters() {
        assert_eq!(scaled_channels(32, 0.25), 8);
        assert_eq!(scaled_channels(64, 0.75), 48);
        assert_eq!(scaled_channels(1024, 0.5), 512);
        assert_eq!(scaled_channels(2, 0.25), 1);
    }

    #[test]
    fn concat_sums_channels() {
        let layer = LayerSpec::Concat {
            branches: vec![
                vec![LayerSpec::PointwiseConv2d { filters: 3, stride: 1 }],
                vec![LayerSpec::MaxPool {
                    size: [3, 3],
                    stride: 1,
                    padding: Padding::Same,
                }],
            ],
        };
        assert_eq!(layer.output_shape(&[5, 6, 6], 1.0).unwrap(), vec![8, 6, 6]);
    }

    #[test]
    fn zero_stride_rejected() {
        let layer = LayerSpec::MaxPool {
            size: [2, 2],
            stride: 0,
            padding: Padding::Valid,
        };
        assert!(layer.validate_params().is_err());
    }

    proptest! {
        #[test]
        fn same_padding_is_ceil(input in 1usize..300, k in 1usize..8, s in 1usize..5) {
            let out = spatial_out(input, k, s, Padding::Same).unwrap();
            prop_assert_eq!(out, (input as f64 / s as f64).ceil() as usize);
            let layer = LayerSpec::Conv2d { filters: 2, kernel: [k, k], stride: s, padding: Padding::Same, in_channels: None };
            prop_assert_eq!(layer.output_shape(&[1, input, input], 1.0).unwrap(), vec![2, out, out]);
        }

        #[test]
        fn valid_padding_is_floor(input in 1usize..300, k in 1usize..8, s in 1usize..5) {
            let got = spatial_out(input, k, s, Padding::Valid);
            if input < k {
                prop_assert!(got.is_none());
            } else {
                prop_assert_eq!(got.unwrap(), (input - k) / s + 1);
            }
        }

        #[test]
        fn same_padding_window_covers_input(input in 1usize..64, k in 1usize..8, s in 1usize..4) {
            let out = spatial_out(input, k, s, Padding::Same).unwrap();
            let before = pad_before(input, out, k, s, Padding::Same);
            let total = ((out - 1) * s + k).saturating_sub(input);
            prop_assert!(before <= total - before);
            // last window starts inside the padded input
            prop_assert!((out - 1) * s < input + before);
        }
    }
}
