//! Adam pretraining that keeps the last `m` end-of-epoch parameter vectors.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, Dataset};
use crate::eval::evaluate;
use crate::network::{backward, init_params, loss, Gradient, NetworkError, NetworkSpec, ParamVector};
use crate::rng::{tag, RngStream};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset samples have shape {data:?}, the network expects {spec:?}")]
    DataShape { data: Vec<usize>, spec: Vec<usize> },
    #[error("training set is empty")]
    EmptyData,
    #[error("gradient contains NaN or infinity")]
    BadGradient,
    #[error("non-finite {what} at epoch {epoch}, step {step}; training aborted")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        /// Newest end-of-epoch parameters (or the initialization).
        last_good: Box<ParamVector<f32>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 strength on weights.
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the epoch training loss falls below this.
    pub loss_floor: f64,
    /// Stop when the loss improved by less than this over `patience` epochs.
    pub min_improvement: f64,
    pub patience: usize,
    /// Number of end-of-epoch snapshots kept (`m`).
    pub ring_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 1e-4,
            batch_size: 64,
            max_epochs: 10,
            loss_floor: 0.0,
            min_improvement: 1e-5,
            patience: 5,
            ring_size: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks every constraint, naming the offending field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let check = |ok: bool, field: &'static str, msg: &str| if ok { Ok(()) } else { Err((field, msg.to_string())) };
        check(self.lr.is_finite() && self.lr > 0.0, "lr", "must be positive")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check(self.eps.is_finite() && self.eps > 0.0, "eps", "must be positive")?;
        check(self.lambda.is_finite() && self.lambda >= 0.0, "lambda", "must be non-negative")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.loss_floor.is_finite(), "loss_floor", "must be finite")?;
        check(self.min_improvement.is_finite(), "min_improvement", "must be finite")?;
        check(self.patience >= 1, "patience", "must be at least 1")?;
        check(self.ring_size >= 4, "ring_size", "must be at least 4")?;
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m1: Vec<T>,
    pub m2: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(d: usize) -> Self {
        Self {
            m1: vec![T::zero(); d],
            m2: vec![T::zero(); d],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Fails without touching anything
/// if the gradient is not finite.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut ParamVector<T>,
    grad: &Gradient<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let g = grad.values();
    if g.len() != params.len() || state.m1.len() != params.len() {
        return Err(NetworkError::ParamLength {
            expected: params.len(),
            got: g.len(),
        }
        .into());
    }
    if !grad.all_finite() {
        return Err(TrainError::BadGradient);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    for (((p, &gi), m1), m2) in params
        .values_mut()
        .iter_mut()
        .zip(g)
        .zip(&mut state.m1)
        .zip(&mut state.m2)
    {
        *m1 = b1 * *m1 + c1 * gi;
        *m2 = b2 * *m2 + c2 * gi * gi;
        let mhat = *m1 / bc1;
        let vhat = *m2 / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingEntry {
    pub epoch: usize,
    pub params: ParamVector<f32>,
    pub train_loss: f64,
}

/// FIFO of the most recent end-of-epoch parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRing {
    capacity: usize,
    slots: VecDeque<RingEntry>,
}

impl CheckpointRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: VecDeque::with_capacity(capacity),
        }
    }

    /// Appends an entry, evicting the oldest when full. Epochs must increase.
    pub fn push(&mut self, entry: RingEntry) {
        assert!(
            self.slots.back().is_none_or(|b| b.epoch < entry.epoch),
            "ring epochs must increase"
        );
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(entry);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &RingEntry> {
        self.slots.iter()
    }

    pub fn newest(&self) -> Option<&RingEntry> {
        self.slots.back()
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.slots.iter().map(|e| e.epoch).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Regularized loss of the end-of-epoch parameters over the full training set.
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_ms: u64,
}

impl EpochMetrics {
    /// The JSON-Lines record; `wall_ms` is zeroed unless `wall_clock`.
    pub fn to_json(&self, wall_clock: bool) -> serde_json::Value {
        serde_json::json!({
            "stage": "bp",
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
            "wall_ms": if wall_clock { self.wall_ms } else { 0 },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    LossFloor,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ParamVector<f32>,
    pub ring: CheckpointRing,
    pub history: Vec<EpochMetrics>,
    pub stop: StopReason,
}

/// Minibatch Adam over shuffled epochs.
///
/// Epoch `e` shuffles with stream `[SHUFFLE, e]`; initialization uses
/// `[INIT]`, both under `cfg.seed`. `observer` sees each epoch as it ends.
pub fn train(
    spec: &NetworkSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()
        .map_err(|(field, msg)| TrainError::Config(format!("{field} {msg}")))?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for d in std::iter::once(data).chain(test) {
        let len: usize = d.sample_shape().iter().product();
        if len != spec.input_len() {
            return Err(TrainError::DataShape {
                data: d.sample_shape().to_vec(),
                spec: spec.input_shape().to_vec(),
            });
        }
    }
    let root = RngStream::new(cfg.seed);
    let mut params: ParamVector<f32> = init_params(spec, &root.child(tag::INIT));
    let mut adam = AdamState::new(params.len());
    let mut ring = CheckpointRing::new(cfg.ring_size);
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let order = batches(data, cfg.batch_size, true, &root.derive(&[tag::SHUFFLE, epoch as u64]));
        for (step, idx) in order.iter().enumerate() {
            let (x, y) = data.gather(idx);
            let (batch_loss, grad) = backward(spec, &params, &x, &y, cfg.lambda)?;
            let abort = |what| TrainError::NonFinite {
                what,
                epoch,
                step,
                last_good: Box::new(ring.newest().map_or_else(
                    || init_params(spec, &root.child(tag::INIT)),
                    |e| e.params.clone(),
                )),
            };
            if !batch_loss.is_finite() {
                return Err(abort("loss"));
            }
            if !grad.all_finite() {
                return Err(abort("gradient"));
            }
            adam_step(&mut adam, &mut params, &grad, cfg)?;
        }
        let train_loss = loss(spec, &params, data.images(), data.labels(), cfg.lambda)?;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "epoch loss",
                epoch,
                step: order.len(),
                last_good: Box::new(ring.newest().map_or_else(
                    || init_params(spec, &root.child(tag::INIT)),
                    |e| e.params.clone(),
                )),
            });
        }
        let (test_loss, test_acc) = match test {
            Some(t) => {
                let r = evaluate(spec, &params, t, 1024)?;
                (Some(r.mean_loss), Some(r.accuracy))
            }
            None => (None, None),
        };
        ring.push(RingEntry {
            epoch,
            params: params.clone(),
            train_loss,
        });
        let m = EpochMetrics {
            epoch,
            train_loss,
            test_loss,
            test_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        observer(&m);
        history.push(m);

        if train_loss < cfg.loss_floor {
            stop = StopReason::LossFloor;
            break;
        }
        if history.len() > cfg.patience {
            let before = history[history.len() - 1 - cfg.patience].train_loss;
            if before - train_loss < cfg.min_improvement {
                stop = StopReason::Plateau;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        final_params: params,
        ring,
        history,
        stop,
    })
}
