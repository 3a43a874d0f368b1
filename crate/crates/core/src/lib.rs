//! Two-stage training of feed-forward classifiers: Adam pretraining that
//! keeps the last `m` end-of-epoch weight vectors, followed by
//! differential-evolution fine-tuning of the flattened weights.

pub mod data;
pub mod de;
pub mod eval;
pub mod network;
pub mod persist;
pub mod rng;
pub mod tensor;
pub mod train;

pub use network::{NetworkSpec, ParamVector};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};
