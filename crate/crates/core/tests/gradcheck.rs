//! Analytic gradients against central finite differences in f64.

use nevo::network::{backward, init_params, loss, NetworkSpec, ParamVector};
use nevo::tensor::Tensor;
use nevo::RngStream;
use rand::Rng;

const H: f64 = 1e-6;

fn batch(spec: &NetworkSpec, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = RngStream::new(seed).rng();
    let mut shape = vec![n];
    shape.extend_from_slice(spec.input_shape());
    let data = (0..n * spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes())).collect();
    (Tensor::new(shape, data).unwrap(), labels)
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|) over all coordinates.
fn max_rel_error(spec: &NetworkSpec, seed: u64, lambda: f64) -> f64 {
    let params: ParamVector<f64> = init_params(spec, &RngStream::new(seed));
    let (x, y) = batch(spec, 5, seed + 1);
    let (_, grad) = backward(spec, &params, &x, &y, lambda).unwrap();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut p = params.clone();
        p.values_mut()[i] += H;
        let up = loss(spec, &p, &x, &y, lambda).unwrap();
        p.values_mut()[i] -= 2.0 * H;
        let down = loss(spec, &p, &x, &y, lambda).unwrap();
        let numeric = (up - down) / (2.0 * H);
        let analytic = grad.values()[i];
        let scale = analytic.abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn mlp() -> NetworkSpec {
    NetworkSpec::from_json(
        r#"{"input_shape":[10],"num_classes":5,"layers":[
            {"type":"dense","in":10,"out":12},{"type":"activation","kind":"tanh"},
            {"type":"dense","in":12,"out":5}]}"#,
    )
    .unwrap()
}

fn conv(act: &str, pool: &str) -> NetworkSpec {
    NetworkSpec::from_json(&format!(
        r#"{{"input_shape":[2,7,7],"num_classes":4,"layers":[
            {{"type":"conv","in_channels":2,"out_channels":3,"kernel":[3,3],"pad":1}},
            {{"type":"activation","kind":"{act}"}},
            {{"type":"pool","kind":"{pool}","size":2,"stride":2}},
            {{"type":"flatten"}},{{"type":"dense","in":27,"out":4}}]}}"#
    ))
    .unwrap()
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let spec = mlp();
    assert_eq!(spec.param_count(), 197);
    for seed in [1, 2, 3] {
        let e = max_rel_error(&spec, seed, 1e-3);
        assert!(e < 1e-4, "seed {seed}: max relative error {e:e}");
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let spec = conv("tanh", "avg");
    for seed in [4, 5] {
        let e = max_rel_error(&spec, seed, 1e-3);
        assert!(e < 1e-4, "seed {seed}: max relative error {e:e}");
    }
}

#[test]
fn relu_max_pool_gradient_matches_finite_differences() {
    // Generic inputs keep every pre-activation and pool window away from ties.
    let e = max_rel_error(&conv("relu", "max"), 6, 0.0);
    assert!(e < 1e-4, "max relative error {e:e}");
}
