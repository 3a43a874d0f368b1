use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::spec::{NetworkSpec, ParamLayout};
use super::NetworkError;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// Flat vector of every trainable weight and bias: the DE genome.
#[derive(Clone, Debug)]
pub struct ParamVector<T = f32> {
    values: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Real> PartialEq for ParamVector<T> {
    fn eq(&self, other: &Self) -> bool {
        // Bitwise comparison: NaN payloads and signed zeros count.
        self.layout == other.layout
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Per-layer weights and bias, reshaped from the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub layer: usize,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            values: vec![T::zero(); spec.param_count()],
            layout: spec.layout().clone(),
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<T>) -> Result<Self, NetworkError> {
        if values.len() != layout.len() {
            return Err(NetworkError::ParamLength {
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        *self.layout == **spec.layout()
    }

    /// Sum of squared weights (biases excluded), accumulated in `f64`.
    pub fn weight_sq_norm(&self) -> f64 {
        let mut s = 0.0f64;
        for seg in self.layout.segments() {
            for &w in seg.weights(&self.values) {
                let w = w.as_f64();
                s += w * w;
            }
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn unflatten(&self) -> Vec<LayerParams<T>> {
        self.layout
            .segments()
            .iter()
            .map(|seg| LayerParams {
                layer: seg.layer,
                weights: Tensor::new(seg.weight_shape.clone(), seg.weights(&self.values).to_vec())
                    .expect("segment shape"),
                bias: Tensor::new(vec![seg.bias_len], seg.bias(&self.values).to_vec())
                    .expect("bias shape"),
            })
            .collect()
    }

    pub fn flatten(layout: Arc<ParamLayout>, parts: &[LayerParams<T>]) -> Result<Self, NetworkError> {
        let segs = layout.segments();
        if parts.len() != segs.len() {
            return Err(NetworkError::ParamLength {
                expected: segs.len(),
                got: parts.len(),
            });
        }
        let mut values = vec![T::zero(); layout.len()];
        for (seg, p) in segs.iter().zip(parts) {
            if p.weights.shape() != seg.weight_shape.as_slice() || p.bias.len() != seg.bias_len {
                return Err(NetworkError::Shape {
                    layer: seg.layer,
                    expected: seg.weight_shape.clone(),
                    got: p.weights.shape().to_vec(),
                });
            }
            values[seg.weight_offset..seg.weight_offset + seg.weight_len()]
                .copy_from_slice(p.weights.data());
            values[seg.bias_offset..seg.bias_offset + seg.bias_len].copy_from_slice(p.bias.data());
        }
        Ok(Self { values, layout })
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Analytic gradient with the same layout as the parameters.
#[derive(Clone, Debug)]
pub struct Gradient<T = f32>(pub ParamVector<T>);

impl<T: Real> PartialEq for Gradient<T> {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl<T: Real> Gradient<T> {
    pub fn values(&self) -> &[T] {
        self.0.values()
    }

    pub fn all_finite(&self) -> bool {
        self.0.all_finite()
    }
}

/// He-uniform fan-in initialization for weights, zero biases.
pub fn init_params<T: Real>(spec: &NetworkSpec, rng: &RngStream) -> ParamVector<T> {
    let mut p = ParamVector::zeros(spec);
    let mut r = rng.rng();
    for seg in spec.layout().segments() {
        let limit = (6.0 / seg.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        for v in &mut p.values[seg.weight_offset..seg.weight_offset + seg.weight_len()] {
            *v = T::from_f64(dist.sample(&mut r));
        }
    }
    p
}

/// Adds independent `N(0, sigma²)` noise to every coordinate.
pub fn jitter<T: Real>(base: &ParamVector<T>, sigma: f64, rng: &mut impl Rng) -> ParamVector<T> {
    let normal = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = base.clone();
    for v in &mut out.values {
        *v += T::from_f64(normal.sample(rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use crate::tensor::ActivationKind;
    use proptest::prelude::*;

    fn spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: [3, 3],
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Activation {
                    kind: ActivationKind::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 32,
                    outputs: 3,
                },
            ],
            vec![1, 4, 4],
            3,
        )
        .unwrap()
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let s = spec();
        let a: ParamVector<f32> = init_params(&s, &RngStream::new(7));
        let b: ParamVector<f32> = init_params(&s, &RngStream::new(7));
        assert_eq!(a, b);
        for seg in s.layout().segments() {
            assert!(seg.bias(a.values()).iter().all(|&v| v == 0.0));
        }
        let c: ParamVector<f32> = init_params(&s, &RngStream::new(8));
        assert_ne!(a, c);
    }

    #[test]
    fn he_uniform_variance() {
        let s = NetworkSpec::new(
            vec![LayerSpec::Dense {
                inputs: 100,
                outputs: 100,
            }],
            vec![100],
            100,
        )
        .unwrap();
        let p: ParamVector<f64> = init_params(&s, &RngStream::new(1));
        let w = s.layout().segments()[0].weights(p.values());
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let want = 2.0 / 100.0;
        assert!((var - want).abs() < 0.2 * want, "variance {var}");
    }

    #[test]
    fn weight_norm_skips_biases() {
        let s = spec();
        let mut p = ParamVector::<f64>::zeros(&s);
        p.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let weights: usize = s.layout().segments().iter().map(|g| g.weight_len()).sum();
        assert_eq!(p.weight_sq_norm(), weights as f64);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(vals in proptest::collection::vec(-1e3f32..1e3, 119)) {
            let s = spec();
            prop_assert_eq!(s.param_count(), 119);
            let p = ParamVector::from_values(s.layout().clone(), vals).unwrap();
            let back = ParamVector::flatten(s.layout().clone(), &p.unflatten()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
