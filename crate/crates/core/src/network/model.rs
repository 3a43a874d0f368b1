//! Forward pass, regularized loss and backpropagation.

use rayon::prelude::*;

use super::params::{Gradient, ParamVector};
use super::spec::{LayerSpec, NetworkSpec};
use super::NetworkError;
use crate::tensor::{
    check_labels, conv_sample, gemm_acc, gemm_tn_acc, mean_loss, pad_planes, pool2d, softmax_row,
    transpose, ConvGeom, PoolKind, Real, Tensor,
};

/// Samples per forward work unit. Fixed so results never depend on the
/// number of worker threads.
pub const FORWARD_CHUNK: usize = 256;

/// Instrumented operation counts of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Multiply-adds executed inside dense and convolution kernels.
    pub madds: u64,
    /// Evaluations of an activation function or its derivative.
    pub activations: u64,
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: Self) {
        self.madds += o.madds;
        self.activations += o.activations;
    }
}

enum Cache<T> {
    Dense { input: Vec<T> },
    Conv { padded: Vec<T> },
    Pool { argmax: Option<Vec<usize>> },
    Act { pre: Vec<T> },
    Flatten,
}

fn check_batch<T: Real>(spec: &NetworkSpec, batch: &Tensor<T>) -> Result<(), NetworkError> {
    if batch.shape().len() < 2 || batch.row_len() != spec.input_len() {
        return Err(NetworkError::Shape {
            layer: 0,
            expected: spec.input_shape().to_vec(),
            got: batch.shape().get(1..).unwrap_or_default().to_vec(),
        });
    }
    Ok(())
}

fn check_params<T: Real>(spec: &NetworkSpec, params: &ParamVector<T>) -> Result<(), NetworkError> {
    if !params.matches(spec) {
        return Err(NetworkError::ParamLength {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Runs all layers over `n` samples stored contiguously in `x`.
fn forward_raw<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    x: &[T],
    n: usize,
    keep: bool,
    count: &mut OpCount,
) -> Result<(Vec<T>, Vec<Cache<T>>), NetworkError> {
    let values = params.values();
    let layout = spec.layout();
    let mut cur = x.to_vec();
    let mut caches = Vec::with_capacity(if keep { spec.layers().len() } else { 0 });
    for (i, layer) in spec.layers().iter().enumerate() {
        let in_shape = spec.layer_input_shape(i);
        let out_len: usize = spec.output_shape(i).iter().product();
        let (next, cache) = match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let seg = layout.segment_for_layer(i).expect("dense segment");
                let mut out = vec![T::zero(); n * outputs];
                count.madds += gemm_acc(&cur, seg.weights(values), &mut out, n, inputs, outputs);
                let bias = seg.bias(values);
                for row in out.chunks_mut(outputs) {
                    for (y, &b) in row.iter_mut().zip(bias) {
                        *y = *y + b;
                    }
                }
                (out, keep.then(|| Cache::Dense { input: cur }))
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                stride,
                pad,
            } => {
                let seg = layout.segment_for_layer(i).expect("conv segment");
                let (h, w) = (in_shape[1], in_shape[2]);
                let out_shape = spec.output_shape(i);
                let g = ConvGeom {
                    in_ch: in_channels,
                    out_ch: out_channels,
                    kh,
                    kw,
                    stride,
                    hp: h + 2 * pad,
                    wp: w + 2 * pad,
                    oh: out_shape[1],
                    ow: out_shape[2],
                };
                let in_len = in_channels * h * w;
                let pad_len = in_channels * g.hp * g.wp;
                let mut out = vec![T::zero(); n * out_len];
                let mut padded = if keep { Vec::with_capacity(n * pad_len) } else { Vec::new() };
                for s in 0..n {
                    let xp = pad_planes(&cur[s * in_len..(s + 1) * in_len], in_channels, h, w, pad);
                    count.madds += conv_sample(
                        &xp,
                        seg.weights(values),
                        seg.bias(values),
                        &g,
                        &mut out[s * out_len..(s + 1) * out_len],
                    );
                    if keep {
                        padded.extend_from_slice(&xp);
                    }
                }
                (out, keep.then(|| Cache::Conv { padded }))
            }
            LayerSpec::Pool { kind, size, stride } => {
                let t = Tensor::new(vec![n, in_shape[0], in_shape[1], in_shape[2]], cur)?;
                let pooled = pool2d(&t, kind, size, stride)?;
                (
                    pooled.output.into_data(),
                    keep.then(|| Cache::Pool {
                        argmax: pooled.argmax,
                    }),
                )
            }
            LayerSpec::Activation { kind } => {
                let out: Vec<T> = cur.iter().map(|&v| kind.value(v)).collect();
                count.activations += out.len() as u64;
                (out, keep.then(|| Cache::Act { pre: cur }))
            }
            LayerSpec::Flatten => (cur, keep.then_some(Cache::Flatten)),
        };
        if let Some(c) = cache {
            caches.push(c);
        }
        cur = next;
    }
    Ok((cur, caches))
}

/// Logits for a batch; pure, and identical for any thread count.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>, NetworkError> {
    check_params(spec, params)?;
    check_batch(spec, batch)?;
    let n = batch.rows();
    let w = batch.row_len();
    let parts: Vec<Vec<T>> = batch
        .data()
        .par_chunks(FORWARD_CHUNK * w)
        .map(|chunk| {
            let mut c = OpCount::default();
            forward_raw(spec, params, chunk, chunk.len() / w, false, &mut c).map(|(out, _)| out)
        })
        .collect::<Result<_, _>>()?;
    let data = parts.concat();
    Ok(Tensor::new(vec![n, spec.num_classes()], data)?)
}

/// Single-threaded forward pass that also reports operation counts.
pub fn forward_counted<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, OpCount), NetworkError> {
    check_params(spec, params)?;
    check_batch(spec, batch)?;
    let mut c = OpCount::default();
    let (out, _) = forward_raw(spec, params, batch.data(), batch.rows(), false, &mut c)?;
    Ok((Tensor::new(vec![batch.rows(), spec.num_classes()], out)?, c))
}

/// Per-sample cross-entropy values, in sample order.
pub fn per_sample_ce<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<T>, NetworkError> {
    check_params(spec, params)?;
    check_batch(spec, batch)?;
    if labels.len() != batch.rows() {
        return Err(NetworkError::LabelCount {
            samples: batch.rows(),
            labels: labels.len(),
        });
    }
    check_labels(labels, spec.num_classes())?;
    let w = batch.row_len();
    let c = spec.num_classes();
    let parts: Vec<Vec<T>> = batch
        .data()
        .par_chunks(FORWARD_CHUNK * w)
        .zip(labels.par_chunks(FORWARD_CHUNK))
        .map(|(chunk, lab)| {
            let mut count = OpCount::default();
            let (logits, _) = forward_raw(spec, params, chunk, lab.len(), false, &mut count)?;
            let mut probs = vec![T::zero(); c];
            Ok(logits
                .chunks(c)
                .zip(lab)
                .map(|(row, &y)| softmax_row(row, y, &mut probs))
                .collect())
        })
        .collect::<Result<_, NetworkError>>()?;
    Ok(parts.concat())
}

/// Mean cross-entropy plus `lambda·Σw²` over weights (biases excluded).
pub fn loss<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<f64, NetworkError> {
    let per = per_sample_ce(spec, params, batch, labels)?;
    Ok(mean_loss(&per) + lambda * params.weight_sq_norm())
}

/// Loss and its exact analytic gradient. The returned loss equals
/// [`loss`] on the same arguments bitwise.
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Gradient<T>), NetworkError> {
    backward_counted(spec, params, batch, labels, lambda).map(|(l, g, _, _)| (l, g))
}

/// [`backward`] that also reports forward and backward operation counts.
pub fn backward_counted<T: Real>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Gradient<T>, OpCount, OpCount), NetworkError> {
    check_params(spec, params)?;
    check_batch(spec, batch)?;
    let n = batch.rows();
    if labels.len() != n {
        return Err(NetworkError::LabelCount {
            samples: n,
            labels: labels.len(),
        });
    }
    let c = spec.num_classes();
    check_labels(labels, c)?;
    let mut fwd = OpCount::default();
    let (logits, caches) = forward_raw(spec, params, batch.data(), n, true, &mut fwd)?;

    let mut per = Vec::with_capacity(n);
    let mut grad_out = vec![T::zero(); n * c];
    for (i, (row, g)) in logits.chunks(c).zip(grad_out.chunks_mut(c)).enumerate() {
        per.push(softmax_row(row, labels[i], g));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    for (i, g) in grad_out.chunks_mut(c).enumerate() {
        g[labels[i]] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    let loss_value = mean_loss(&per) + lambda * params.weight_sq_norm();

    let values = params.values();
    let layout = spec.layout();
    let mut grad = vec![T::zero(); params.len()];
    let mut bwd = OpCount::default();
    let mut dy = grad_out;
    for (i, (layer, cache)) in spec.layers().iter().zip(caches).enumerate().rev() {
        let need_dx = i > 0;
        let in_shape = spec.layer_input_shape(i);
        let in_len: usize = in_shape.iter().product();
        dy = match (*layer, cache) {
            (LayerSpec::Dense { inputs, outputs }, Cache::Dense { input }) => {
                let seg = layout.segment_for_layer(i).expect("dense segment");
                let (gw, gb) = split_grad(&mut grad, seg.weight_offset, seg.weight_len(), seg.bias_offset, seg.bias_len);
                bwd.madds += gemm_tn_acc(&input, &dy, gw, n, inputs, outputs);
                for row in dy.chunks(outputs) {
                    for (b, &v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                if need_dx {
                    let wt = transpose(seg.weights(values), inputs, outputs);
                    let mut dx = vec![T::zero(); n * inputs];
                    bwd.madds += gemm_acc(&dy, &wt, &mut dx, n, outputs, inputs);
                    dx
                } else {
                    Vec::new()
                }
            }
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel: [kh, kw],
                    stride,
                    pad,
                },
                Cache::Conv { padded },
            ) => {
                let seg = layout.segment_for_layer(i).expect("conv segment");
                let out_shape = spec.output_shape(i);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let (h, w) = (in_shape[1], in_shape[2]);
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let kern = seg.weights(values);
                let (gw, gb) = split_grad(&mut grad, seg.weight_offset, seg.weight_len(), seg.bias_offset, seg.bias_len);
                let plane = oh * ow;
                let pad_len = in_channels * hp * wp;
                let mut dx = if need_dx { vec![T::zero(); n * in_len] } else { Vec::new() };
                let mut dpad = vec![T::zero(); if need_dx { pad_len } else { 0 }];
                for s in 0..n {
                    let xp = &padded[s * pad_len..(s + 1) * pad_len];
                    let dys = &dy[s * out_channels * plane..(s + 1) * out_channels * plane];
                    dpad.iter_mut().for_each(|v| *v = T::zero());
                    for k in 0..out_channels {
                        let dk = &dys[k * plane..(k + 1) * plane];
                        for &v in dk {
                            gb[k] += v;
                        }
                        for ci in 0..in_channels {
                            let xin = &xp[ci * hp * wp..(ci + 1) * hp * wp];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let widx = ((k * in_channels + ci) * kh + ky) * kw + kx;
                                    let wv = kern[widx];
                                    let mut acc = T::zero();
                                    for oy in 0..oh {
                                        let row = (oy * stride + ky) * wp + kx;
                                        for ox in 0..ow {
                                            let d = dk[oy * ow + ox];
                                            let xi = row + ox * stride;
                                            acc += d * xin[xi];
                                            if need_dx {
                                                dpad[ci * hp * wp + xi] += wv * d;
                                            }
                                        }
                                    }
                                    gw[widx] += acc;
                                    bwd.madds += plane as u64 * if need_dx { 2 } else { 1 };
                                }
                            }
                        }
                    }
                    if need_dx {
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        for ci in 0..in_channels {
                            for y in 0..h {
                                let src = (ci * hp + y + pad) * wp + pad;
                                dxs[(ci * h + y) * w..(ci * h + y + 1) * w]
                                    .copy_from_slice(&dpad[src..src + w]);
                            }
                        }
                    }
                }
                dx
            }
            (LayerSpec::Pool { kind, size, .. }, Cache::Pool { argmax }) => {
                let mut dx = vec![T::zero(); n * in_len];
                match kind {
                    PoolKind::Max => {
                        let arg = argmax.expect("max pool keeps argmax");
                        for (&src, &g) in arg.iter().zip(&dy) {
                            dx[src] += g;
                        }
                    }
                    PoolKind::Avg => {
                        let LayerSpec::Pool { stride, .. } = *layer else { unreachable!() };
                        let out_shape = spec.output_shape(i);
                        let (oh, ow) = (out_shape[1], out_shape[2]);
                        let (h, w) = (in_shape[1], in_shape[2]);
                        let inv = T::from_f64(1.0 / (size * size) as f64);
                        for p in 0..n * in_shape[0] {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = dy[(p * oh + oy) * ow + ox] * inv;
                                    for ky in 0..size {
                                        for kx in 0..size {
                                            dx[(p * h + oy * stride + ky) * w + ox * stride + kx] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            (LayerSpec::Activation { kind }, Cache::Act { pre }) => {
                bwd.activations += pre.len() as u64;
                dy.iter().zip(&pre).map(|(&g, &z)| g * kind.derivative(z)).collect()
            }
            (LayerSpec::Flatten, Cache::Flatten) => dy,
            _ => unreachable!("cache kind follows layer kind"),
        };
        if !need_dx {
            break;
        }
    }

    if lambda != 0.0 {
        let two_lambda = T::from_f64(2.0 * lambda);
        for seg in layout.segments() {
            let r = seg.weight_offset..seg.weight_offset + seg.weight_len();
            for (g, &w) in grad[r.clone()].iter_mut().zip(&values[r]) {
                *g += two_lambda * w;
            }
        }
    }
    let grad = ParamVector::from_values(layout.clone(), grad)?;
    Ok((loss_value, Gradient(grad), fwd, bwd))
}

fn split_grad<T>(
    grad: &mut [T],
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(w_off + w_len, b_off);
    let (w, rest) = grad[w_off..b_off + b_len].split_at_mut(w_len);
    (w, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, LayerSpec};
    use crate::rng::RngStream;
    use crate::tensor::{softmax_ce, ActivationKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mlp(sizes: &[usize], act: ActivationKind) -> NetworkSpec {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
            });
            layers.push(LayerSpec::Activation { kind: act });
        }
        layers.pop();
        NetworkSpec::new(layers, vec![sizes[0]], *sizes.last().unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let s = mlp(&[4, 3, 2], ActivationKind::Relu);
        let mut p = ParamVector::<f32>::zeros(&s);
        let seg = &s.layout().segments()[1];
        p.values_mut()[seg.bias_offset] = 0.25;
        p.values_mut()[seg.bias_offset + 1] = -2.0;
        let x = Tensor::full(&[5, 4], 0.7f32);
        let y = forward(&s, &p, &x).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -2.0]);
        }
    }

    #[test]
    fn identity_dense_relu_passthrough() {
        let s = NetworkSpec::new(
            vec![
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 3,
                },
                LayerSpec::Activation {
                    kind: ActivationKind::Relu,
                },
            ],
            vec![3],
            3,
        )
        .unwrap();
        let mut p = ParamVector::<f32>::zeros(&s);
        for i in 0..3 {
            p.values_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::new(vec![2, 3], vec![0.0f32, 1.5, 3.0, 2.0, 0.1, 9.0]).unwrap();
        assert_eq!(forward(&s, &p, &x).unwrap(), x);
    }

    #[test]
    fn forward_is_chunking_and_thread_invariant() {
        let s = mlp(&[20, 16, 5], ActivationKind::Tanh);
        let p: ParamVector<f32> = init_params(&s, &RngStream::new(3));
        let x = random_batch(&[700, 20], 1).cast::<f32>();
        let a = forward(&s, &p, &x).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| forward(&s, &p, &x).unwrap());
        let (c, _) = forward_counted(&s, &p, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let s = mlp(&[4, 2], ActivationKind::Relu);
        let p = ParamVector::<f32>::zeros(&s);
        let err = forward(&s, &p, &Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(matches!(err, NetworkError::Shape { layer: 0, .. }));
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let s = mlp(&[6, 5, 4], ActivationKind::Relu);
        let p: ParamVector<f64> = init_params(&s, &RngStream::new(2));
        let x = random_batch(&[9, 6], 4);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 0];
        let logits = forward(&s, &p, &x).unwrap();
        let ce = softmax_ce(&logits, &labels).unwrap().loss;
        assert_eq!(loss(&s, &p, &x, &labels, 0.0).unwrap(), ce);
    }

    #[test]
    fn lambda_is_linear() {
        let s = mlp(&[6, 5, 4], ActivationKind::Relu);
        let p: ParamVector<f64> = init_params(&s, &RngStream::new(2));
        let x = random_batch(&[9, 6], 4);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 0];
        let lam = 1e-4;
        let l1 = loss(&s, &p, &x, &labels, lam).unwrap();
        let l2 = loss(&s, &p, &x, &labels, 2.0 * lam).unwrap();
        let want = lam * p.weight_sq_norm();
        assert!((l2 - l1 - want).abs() < 1e-15, "{} vs {want}", l2 - l1);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let s = mlp(&[6, 5, 4], ActivationKind::Relu);
        let p: ParamVector<f64> = init_params(&s, &RngStream::new(2));
        let x = random_batch(&[8, 6], 4);
        let labels = vec![0, 1, 2, 3, 3, 2, 1, 0];
        let perm = [7, 2, 5, 0, 1, 6, 3, 4];
        let xp = x.gather_rows(&perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = loss(&s, &p, &x, &labels, 1e-3).unwrap();
        let b = loss(&s, &p, &xp, &lp, 1e-3).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn backward_loss_matches_loss_bitwise() {
        let s = mlp(&[6, 5, 4], ActivationKind::Relu);
        let p: ParamVector<f32> = init_params(&s, &RngStream::new(2));
        let x = random_batch(&[300, 6], 4).cast::<f32>();
        let labels: Vec<usize> = (0..300).map(|i| i % 4).collect();
        let (l, _) = backward(&s, &p, &x, &labels, 1e-4).unwrap();
        assert_eq!(l, loss(&s, &p, &x, &labels, 1e-4).unwrap());
    }

    #[test]
    fn zero_batch_zero_params_gradient() {
        let s = mlp(&[3, 4, 2], ActivationKind::Relu);
        let p = ParamVector::<f64>::zeros(&s);
        let x = Tensor::<f64>::zeros(&[4, 3]);
        let labels = [0, 1, 1, 1];
        let (_, g) = backward(&s, &p, &x, &labels, 0.0).unwrap();
        let out = &s.layout().segments()[1];
        // logits are all zero, so probs are 1/2 and dlogits column means are
        // mean(p - onehot) = 0.5 - frequency(class).
        assert_eq!(out.bias(g.values()), &[0.5 - 0.25, 0.5 - 0.75]);
        for seg in s.layout().segments() {
            assert!(seg.weights(g.values()).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn l2_gradient_is_two_lambda_theta() {
        let s = mlp(&[3, 4, 2], ActivationKind::Tanh);
        let p: ParamVector<f64> = init_params(&s, &RngStream::new(9));
        let x = random_batch(&[5, 3], 2);
        let labels = [0, 1, 0, 1, 1];
        let lam = 0.01;
        let (_, g0) = backward(&s, &p, &x, &labels, 0.0).unwrap();
        let (_, g1) = backward(&s, &p, &x, &labels, lam).unwrap();
        for seg in s.layout().segments() {
            for j in seg.weight_offset..seg.weight_offset + seg.weight_len() {
                let diff = g1.values()[j] - g0.values()[j];
                assert!((diff - 2.0 * lam * p.values()[j]).abs() < 1e-15);
            }
            for j in seg.bias_offset..seg.bias_offset + seg.bias_len {
                assert_eq!(g1.values()[j], g0.values()[j]);
            }
        }
    }
}
