//! Architecture specs, flat parameter layout, forward/backward passes.

mod model;
mod params;
mod spec;
pub mod zoo;

use thiserror::Error;

pub use model::{
    backward, backward_counted, forward, forward_counted, loss, per_sample_ce, OpCount, FORWARD_CHUNK,
};
pub use params::{init_params, jitter, Gradient, LayerParams, ParamVector};
pub use spec::{param_count, LayerSpec, NetworkSpec, ParamLayout, Segment};

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },
    #[error("network spec JSON: {0}")]
    Json(String),
    #[error("parameter vector has length {got}, spec needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("layer {layer}: expected per-sample shape {expected:?}, got {got:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{samples} samples but {labels} labels")]
    LabelCount { samples: usize, labels: usize },
    #[error("unknown model '{0}' (known: mlp, lenet1, lenet5, lenet5_rgb)")]
    UnknownModel(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
