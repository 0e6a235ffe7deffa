//! Per-level layer plans.
//!
//! A block definition expands into a flat list of [`LayerDesc`]s describing,
//! per branch, the primitive operations and their parameter slots. Parameter
//! initialization, both evaluation engines, the tape forward pass, and the
//! operation counter all walk the same descriptors, so they cannot drift
//! apart on what a block actually computes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tree::{BlockKind, InputSpec, TreeSpec};

/// Per-branch activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FeatShape {
    Vector { dim: usize },
    Image { c: usize, h: usize, w: usize },
}

impl FeatShape {
    pub(crate) fn from_input(input: &InputSpec) -> Self {
        match *input {
            InputSpec::Features { dim } => FeatShape::Vector { dim },
            InputSpec::Image { channels, height, width } => {
                FeatShape::Image { c: channels, h: height, w: width }
            }
        }
    }

    /// Elements per branch.
    pub(crate) fn numel(&self) -> usize {
        match *self {
            FeatShape::Vector { dim } => dim,
            FeatShape::Image { c, h, w } => c * h * w,
        }
    }
}

/// One primitive operation within a block, per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerDesc {
    /// View an image activation as a feature vector.
    Flatten { c: usize, h: usize, w: usize },
    Linear {
        cin: usize,
        cout: usize,
        bias: bool,
    },
    Conv {
        cin: usize,
        cout: usize,
        /// Convolution groups within the branch: 1 for dense, `cin` for
        /// depthwise.
        conv_groups: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    /// Batch normalization over `c` channels.
    Norm { c: usize },
    Relu,
    /// Spatial mean per channel.
    GlobalPool { c: usize, h: usize, w: usize },
}

impl LayerDesc {
    /// Number of parameter slots this layer owns.
    pub(crate) fn slot_count(&self) -> usize {
        match *self {
            LayerDesc::Linear { bias, .. } | LayerDesc::Conv { bias, .. } => 1 + bias as usize,
            LayerDesc::Norm { .. } => 5,
            _ => 0,
        }
    }
}

/// Slot offsets within a [`LayerDesc::Norm`] entry.
pub(crate) const NORM_GAMMA: usize = 0;
pub(crate) const NORM_BETA: usize = 1;
pub(crate) const NORM_MEAN: usize = 2;
pub(crate) const NORM_VAR: usize = 3;
pub(crate) const NORM_COUNT: usize = 4;

/// Normalization epsilon and running-statistic momentum.
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::InvalidArgument {
            op: "TreeSpec",
            message: format!("spatial extent {extent} too small for kernel {k}"),
        });
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::InvalidArgument {
            op: "TreeSpec",
            message: format!("stride {stride} collapses spatial extent {extent}"),
        });
    }
    Ok(out)
}

/// Expand one level into layer descriptors and compute its output shape.
pub(crate) fn level_plan(
    spec: &TreeSpec,
    level: usize,
    mut shape: FeatShape,
) -> Result<(Vec<LayerDesc>, FeatShape)> {
    let block = &spec.blocks[level];
    let mut descs = Vec::new();
    let layer_bias = |norm: bool| !norm || spec.bias_with_norm;
    match block.kind {
        BlockKind::Linear => {
            if let FeatShape::Image { c, h, w } = shape {
                descs.push(LayerDesc::Flatten { c, h, w });
                shape = FeatShape::Vector { dim: c * h * w };
            }
            for _ in 0..block.layers {
                let FeatShape::Vector { dim } = shape else { unreachable!() };
                descs.push(LayerDesc::Linear {
                    cin: dim,
                    cout: block.width,
                    bias: layer_bias(block.norm),
                });
                if block.norm {
                    descs.push(LayerDesc::Norm { c: block.width });
                }
                descs.push(LayerDesc::Relu);
                shape = FeatShape::Vector { dim: block.width };
            }
        }
        BlockKind::Conv => {
            for layer in 0..block.layers {
                let FeatShape::Image { c, h, w } = shape else {
                    return Err(Error::InvalidArgument {
                        op: "TreeSpec",
                        message: format!(
                            "block {level} is convolutional but its input is a feature vector"
                        ),
                    });
                };
                let stride = if layer == 0 { block.stride } else { 1 };
                if block.depthwise && block.kernel > 1 {
                    let pad = block.kernel / 2;
                    let ho = conv_out(h, block.kernel, stride, pad)?;
                    let wo = conv_out(w, block.kernel, stride, pad)?;
                    descs.push(LayerDesc::Conv {
                        cin: c,
                        cout: c,
                        conv_groups: c,
                        k: block.kernel,
                        stride,
                        pad,
                        bias: layer_bias(block.norm),
                    });
                    if block.norm {
                        descs.push(LayerDesc::Norm { c });
                    }
                    descs.push(LayerDesc::Relu);
                    descs.push(LayerDesc::Conv {
                        cin: c,
                        cout: block.width,
                        conv_groups: 1,
                        k: 1,
                        stride: 1,
                        pad: 0,
                        bias: layer_bias(block.norm),
                    });
                    if block.norm {
                        descs.push(LayerDesc::Norm { c: block.width });
                    }
                    descs.push(LayerDesc::Relu);
                    shape = FeatShape::Image { c: block.width, h: ho, w: wo };
                } else {
                    let pad = block.kernel / 2;
                    let ho = conv_out(h, block.kernel, stride, pad)?;
                    let wo = conv_out(w, block.kernel, stride, pad)?;
                    descs.push(LayerDesc::Conv {
                        cin: c,
                        cout: block.width,
                        conv_groups: 1,
                        k: block.kernel,
                        stride,
                        pad,
                        bias: layer_bias(block.norm),
                    });
                    if block.norm {
                        descs.push(LayerDesc::Norm { c: block.width });
                    }
                    descs.push(LayerDesc::Relu);
                    shape = FeatShape::Image { c: block.width, h: ho, w: wo };
                }
            }
        }
    }
    // The leaf level ends in the classifier head.
    if level == spec.depth {
        if let FeatShape::Image { c, h, w } = shape {
            descs.push(LayerDesc::GlobalPool { c, h, w });
            shape = FeatShape::Vector { dim: c };
        }
        let FeatShape::Vector { dim } = shape else { unreachable!() };
        descs.push(LayerDesc::Linear { cin: dim, cout: spec.classes, bias: true });
        shape = FeatShape::Vector { dim: spec.classes };
    }
    Ok((descs, shape))
}

/// Input shape of a level, walking the ladder from the root.
pub(crate) fn level_input_shape(spec: &TreeSpec, level: usize) -> Result<FeatShape> {
    let mut shape = FeatShape::from_input(&spec.input);
    for l in 0..level {
        let (_, out) = level_plan(spec, l, shape)?;
        shape = out;
    }
    Ok(shape)
}

/// Layer descriptors of one level.
pub(crate) fn level_layers(spec: &TreeSpec, level: usize) -> Result<Vec<LayerDesc>> {
    let shape = level_input_shape(spec, level)?;
    Ok(level_plan(spec, level, shape)?.0)
}

/// Final per-branch output shape (always `[classes]`); walking the whole
/// ladder doubles as shape validation.
pub(crate) fn output_shape(spec: &TreeSpec) -> Result<FeatShape> {
    level_input_shape(spec, spec.depth + 1)
}

/// Small all-linear spec used across the test suites.
#[cfg(test)]
pub(crate) fn toy_linear_spec(
    depth: usize,
    classes: usize,
    input_dim: usize,
    width: usize,
    norm: bool,
) -> TreeSpec {
    use crate::tree::{AverageMode, BlockSpec, TopologyKind};
    TreeSpec {
        depth,
        classes,
        input: InputSpec::Features { dim: input_dim },
        blocks: (0..=depth)
            .map(|_| BlockSpec {
                kind: BlockKind::Linear,
                layers: 1,
                width,
                stride: 1,
                kernel: 3,
                depthwise: false,
                norm,
            })
            .collect(),
        topology: TopologyKind::Hne,
        average: AverageMode::Logits,
        bias_with_norm: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::BlockSpec;

    #[test]
    fn linear_plan_shapes() {
        let spec = toy_linear_spec(1, 3, 4, 6, true);
        let descs = level_layers(&spec, 0).unwrap();
        assert_eq!(
            descs,
            alloc::vec![
                LayerDesc::Linear { cin: 4, cout: 6, bias: false },
                LayerDesc::Norm { c: 6 },
                LayerDesc::Relu,
            ]
        );
        let leaf = level_layers(&spec, 1).unwrap();
        assert_eq!(leaf.last(), Some(&LayerDesc::Linear { cin: 6, cout: 3, bias: true }));
    }

    #[test]
    fn conv_plan_tracks_spatial_extents() {
        let mut spec = toy_linear_spec(1, 10, 4, 8, false);
        spec.input = InputSpec::Image { channels: 3, height: 8, width: 8 };
        spec.blocks = alloc::vec![
            BlockSpec {
                kind: BlockKind::Conv,
                layers: 1,
                width: 8,
                stride: 2,
                kernel: 3,
                depthwise: false,
                norm: true,
            },
            BlockSpec {
                kind: BlockKind::Conv,
                layers: 1,
                width: 8,
                stride: 1,
                kernel: 3,
                depthwise: true,
                norm: true,
            },
        ];
        assert!(spec.validate().is_ok());
        let shape = level_input_shape(&spec, 1).unwrap();
        assert_eq!(shape, FeatShape::Image { c: 8, h: 4, w: 4 });
        let leaf = level_layers(&spec, 1).unwrap();
        // depthwise 3x3, then pointwise 1x1, then pool + classifier
        assert!(matches!(leaf[0], LayerDesc::Conv { conv_groups: 8, k: 3, .. }));
        assert!(matches!(leaf[3], LayerDesc::Conv { conv_groups: 1, k: 1, .. }));
        assert!(matches!(leaf[6], LayerDesc::GlobalPool { c: 8, h: 4, w: 4 }));
        assert_eq!(leaf.last(), Some(&LayerDesc::Linear { cin: 8, cout: 10, bias: true }));
    }

    #[test]
    fn conv_after_features_is_rejected() {
        let mut spec = toy_linear_spec(1, 3, 4, 6, false);
        spec.blocks[1].kind = BlockKind::Conv;
        assert!(spec.validate().is_err());
    }
}
