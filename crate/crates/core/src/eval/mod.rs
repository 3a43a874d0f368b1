//! Accuracy, corruption error and mCE, operation counters, run reports.

pub mod cost;
pub mod mce;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::network::{forward, NetworkError, NetworkSpec, ParamVector};
use crate::tensor::{check_labels, mean_loss, softmax_row, Real, Tensor};

pub use cost::{count_costs, CostCounter};
pub use mce::{mce, MceError, MceTable};
pub use report::{collect, report, Report, ReportFormat, ReportRow, RunSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub error: f64,
    /// Mean cross-entropy, without regularization.
    pub mean_loss: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classifies `images` in batches and scores against `labels`.
pub fn evaluate_tensor<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    images: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<(usize, f64), NetworkError> {
    if images.rows() != labels.len() {
        return Err(NetworkError::LabelCount {
            samples: images.rows(),
            labels: labels.len(),
        });
    }
    check_labels(labels, spec.num_classes())?;
    let c = spec.num_classes();
    let bs = batch_size.max(1);
    let mut correct = 0;
    let mut per = Vec::with_capacity(labels.len());
    let mut probs = vec![T::zero(); c];
    for start in (0..labels.len()).step_by(bs) {
        let end = (start + bs).min(labels.len());
        let logits = forward(spec, params, &images.slice_rows(start, end))?;
        for (row, &y) in logits.data().chunks(c).zip(&labels[start..end]) {
            correct += usize::from(argmax(row) == y);
            per.push(softmax_row(row, y, &mut probs));
        }
    }
    Ok((correct, mean_loss(&per)))
}

pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamVector<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport, NetworkError> {
    let (correct, loss) = evaluate_tensor(spec, params, data.images(), data.labels(), batch_size)?;
    let n = data.len();
    let accuracy = correct as f64 / n as f64;
    Ok(EvalReport {
        dataset: data.name().to_string(),
        n_samples: n,
        correct,
        accuracy,
        error: 1.0 - accuracy,
        mean_loss: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, LayerSpec};
    use crate::RngStream;

    fn data(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        let px = (0..n * 4).map(|i| (i % 7) as f32 / 6.0).collect();
        Dataset::new("t", Tensor::new(vec![n, 1, 2, 2], px).unwrap(), labels, 10).unwrap()
    }

    fn dense() -> NetworkSpec {
        NetworkSpec::new(vec![LayerSpec::Dense { inputs: 4, outputs: 10 }], vec![4], 10).unwrap()
    }

    #[test]
    fn zero_net_predicts_class_zero() {
        let d = data(vec![0, 1, 0, 3, 0, 9, 2, 0]);
        let r = evaluate(&dense(), &ParamVector::zeros(&dense()), &d, 3).unwrap();
        assert_eq!(r.correct, 4);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.accuracy + r.error, 1.0);
        assert!((r.mean_loss - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }

    #[test]
    fn batch_size_invariance() {
        let s = dense();
        let p = init_params::<f32>(&s, &RngStream::new(3));
        let d = data((0..37).map(|i| i % 10).collect());
        let a = evaluate(&s, &p, &d, 1).unwrap();
        for bs in [2, 5, 16, 100] {
            assert_eq!(evaluate(&s, &p, &d, bs).unwrap(), a);
        }
    }

    #[test]
    fn one_hot_logits_score_perfectly() {
        // Identity-like weights: input pixel k drives class k.
        let s = NetworkSpec::new(vec![LayerSpec::Dense { inputs: 4, outputs: 10 }], vec![4], 10).unwrap();
        let mut p = ParamVector::<f32>::zeros(&s);
        for k in 0..4 {
            p.values_mut()[k * 10 + k] = 1.0;
        }
        let mut px = vec![0.0f32; 16];
        for k in 0..4 {
            px[k * 4 + k] = 1.0;
        }
        let d = Dataset::new("hot", Tensor::new(vec![4, 1, 2, 2], px).unwrap(), vec![0, 1, 2, 3], 10).unwrap();
        assert_eq!(evaluate(&s, &p, &d, 2).unwrap().accuracy, 1.0);
    }
}
