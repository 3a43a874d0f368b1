use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::NetworkError;
use crate::tensor::{window_out, ActivationKind, PoolKind};

/// One layer of a feed-forward network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Pool {
        kind: PoolKind,
        size: usize,
        stride: usize,
    },
    Activation {
        kind: ActivationKind,
    },
    Flatten,
}

fn one() -> usize {
    1
}

/// Where one parameterized layer lives inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub weight_offset: usize,
    /// `[in, out]` for dense, `[K, C, kh, kw]` for conv.
    pub weight_shape: Vec<usize>,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl Segment {
    pub fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }

    /// Inputs feeding each output unit.
    pub fn fan_in(&self) -> usize {
        self.weight_len() / self.bias_len
    }

    pub fn weights<'a, T>(&self, values: &'a [T]) -> &'a [T] {
        &values[self.weight_offset..self.weight_offset + self.weight_len()]
    }

    pub fn bias<'a, T>(&self, values: &'a [T]) -> &'a [T] {
        &values[self.bias_offset..self.bias_offset + self.bias_len]
    }
}

/// Segment table derived from a spec; two vectors with equal layouts are
/// elementwise comparable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segment_for_layer(&self, layer: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
}

/// A validated, immutable architecture description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    num_classes: usize,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    layout: Arc<ParamLayout>,
}

impl PartialEq for NetworkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
    }
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = NetworkError;

    fn try_from(raw: RawSpec) -> Result<Self, NetworkError> {
        NetworkSpec::new(raw.layers, raw.input_shape, raw.num_classes)
    }
}

impl From<NetworkSpec> for RawSpec {
    fn from(s: NetworkSpec) -> Self {
        RawSpec {
            input_shape: s.input_shape,
            num_classes: s.num_classes,
            layers: s.layers,
        }
    }
}

impl NetworkSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, NetworkError> {
        let invalid = |layer: usize, reason: String| NetworkError::InvalidSpec { layer, reason };
        if input_shape.is_empty() || input_shape.len() == 2 || input_shape.len() > 3 {
            return Err(invalid(0, format!("input shape {input_shape:?} must be [F] or [C,H,W]")));
        }
        if input_shape.contains(&0) || num_classes == 0 {
            return Err(invalid(0, "zero-sized input or class count".into()));
        }
        let mut shape = input_shape.clone();
        let mut shapes = Vec::with_capacity(layers.len());
        let mut segments = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if shape != [inputs] {
                        return Err(invalid(i, format!("dense expects [{inputs}], got {shape:?}")));
                    }
                    if outputs == 0 {
                        return Err(invalid(i, "dense with zero outputs".into()));
                    }
                    segments.push(Segment {
                        layer: i,
                        weight_offset: offset,
                        weight_shape: vec![inputs, outputs],
                        bias_offset: offset + inputs * outputs,
                        bias_len: outputs,
                    });
                    offset += inputs * outputs + outputs;
                    vec![outputs]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel: [kh, kw],
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(invalid(
                            i,
                            format!("conv expects [{in_channels},H,W], got {shape:?}"),
                        ));
                    }
                    if out_channels == 0 {
                        return Err(invalid(i, "conv with zero output channels".into()));
                    }
                    let oh = window_out(shape[1], kh, stride, pad);
                    let ow = window_out(shape[2], kw, stride, pad);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(invalid(i, format!("conv window does not fit {shape:?}")));
                    };
                    let wlen = out_channels * in_channels * kh * kw;
                    segments.push(Segment {
                        layer: i,
                        weight_offset: offset,
                        weight_shape: vec![out_channels, in_channels, kh, kw],
                        bias_offset: offset + wlen,
                        bias_len: out_channels,
                    });
                    offset += wlen + out_channels;
                    vec![out_channels, oh, ow]
                }
                LayerSpec::Pool { size, stride, .. } => {
                    if shape.len() != 3 {
                        return Err(invalid(i, format!("pool expects [C,H,W], got {shape:?}")));
                    }
                    let oh = window_out(shape[1], size, stride, 0);
                    let ow = window_out(shape[2], size, stride, 0);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(invalid(i, format!("pool window does not fit {shape:?}")));
                    };
                    vec![shape[0], oh, ow]
                }
                LayerSpec::Activation { .. } => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            shapes.push(shape.clone());
        }
        if shape != [num_classes] {
            return Err(invalid(
                layers.len().saturating_sub(1),
                format!("final output {shape:?} does not match {num_classes} classes"),
            ));
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            shapes,
            layout: Arc::new(ParamLayout {
                segments,
                len: offset,
            }),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Total trainable parameter count `d`.
    pub fn param_count(&self) -> usize {
        self.layout.len
    }
}

pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.param_count()
}
