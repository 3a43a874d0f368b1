//! Dense row-major tensors and the small set of kernels the networks need.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible
//! no matter how callers split work across threads. Multiply-add counts are
//! returned from the internal kernels so the cost model can be checked
//! against instrumented runs rather than formulas.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Storage precision tag, also used by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar type usable in tensors: `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one value; `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "tensor",
                shape,
                reason: "all dims must be >= 1".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                shape,
                reason: format!("expects {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "zero-sized tensor {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a 2-D tensor from nested rows; rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, the batch size for batched tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Copies rows `idx` (along the leading dim) into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Rows `[start, end)` of the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Shape {
            op: "concat_rows",
            shape: vec![],
            reason: "no parts".into(),
        })?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::DimMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = A·B` for 2-D tensors. Each `C[i][j]` accumulates `A[i][t]·B[t][j]`
/// left to right over `t`, starting from zero.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::DimMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (r, k, c) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); r * c];
    gemm_acc(&a.data, &b.data, &mut out, r, k, c);
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// Accumulates `a[rows×inner] · b[inner×cols]` into `c`, returns madds.
///
/// Rows are processed four at a time so each row of `b` is loaded once per
/// block; the per-element summation order is still `t = 0, 1, ...`.
pub(crate) fn gemm_acc<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: usize,
    inner: usize,
    cols: usize,
) -> u64 {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(c.len(), rows * cols);
    let mut madds = 0u64;
    let mut i = 0;
    while i + 4 <= rows {
        let block = &mut c[i * cols..(i + 4) * cols];
        let (c0, rest) = block.split_at_mut(cols);
        let (c1, rest) = rest.split_at_mut(cols);
        let (c2, c3) = rest.split_at_mut(cols);
        let a0 = &a[i * inner..(i + 1) * inner];
        let a1 = &a[(i + 1) * inner..(i + 2) * inner];
        let a2 = &a[(i + 2) * inner..(i + 3) * inner];
        let a3 = &a[(i + 3) * inner..(i + 4) * inner];
        for t in 0..inner {
            let brow = &b[t * cols..(t + 1) * cols];
            let (x0, x1, x2, x3) = (a0[t], a1[t], a2[t], a3[t]);
            for ((((y0, y1), y2), y3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
                *y2 += x2 * bv;
                *y3 += x3 * bv;
            }
            madds += 4 * cols as u64;
        }
        i += 4;
    }
    while i < rows {
        let crow = &mut c[i * cols..(i + 1) * cols];
        let arow = &a[i * inner..(i + 1) * inner];
        for (t, &x) in arow.iter().enumerate() {
            let brow = &b[t * cols..(t + 1) * cols];
            for (y, &bv) in crow.iter_mut().zip(brow) {
                *y += x * bv;
            }
            madds += cols as u64;
        }
        i += 1;
    }
    madds
}

/// Accumulates `aᵀ·b` into `c[inner×cols]` where `a` is `rows×inner` and
/// `b` is `rows×cols`; sums run over `rows` in index order. Returns madds.
pub(crate) fn gemm_tn_acc<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: usize,
    inner: usize,
    cols: usize,
) -> u64 {
    let mut madds = 0u64;
    for n in 0..rows {
        let arow = &a[n * inner..(n + 1) * inner];
        let brow = &b[n * cols..(n + 1) * cols];
        for (t, &x) in arow.iter().enumerate() {
            let crow = &mut c[t * cols..(t + 1) * cols];
            for (y, &bv) in crow.iter_mut().zip(brow) {
                *y += x * bv;
            }
            madds += cols as u64;
        }
    }
    madds
}

pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Output spatial size of a sliding window, `None` when it does not fit.
pub fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Zero-pads every `H×W` plane of a `[planes, H, W]` buffer.
pub(crate) fn pad_planes<T: Real>(x: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let start = (p * hp + y + pad) * wp + pad;
            out[start..start + w].copy_from_slice(src);
        }
    }
    out
}

/// Geometry of one convolution, with the input already padded.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// Padded input height and width.
    pub hp: usize,
    pub wp: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Cross-correlation of one padded sample `[C,hp,wp]` into `out[K,oh,ow]`.
///
/// Each output element sums `w·x` over `(c, dy, dx)` in lexicographic order
/// starting from zero, then adds the bias.
pub(crate) fn conv_sample<T: Real>(
    x: &[T],
    kernels: &[T],
    bias: &[T],
    g: &ConvGeom,
    out: &mut [T],
) -> u64 {
    let mut madds = 0u64;
    let plane = g.oh * g.ow;
    for k in 0..g.out_ch {
        let acc = &mut out[k * plane..(k + 1) * plane];
        acc.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..g.in_ch {
            let xin = &x[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let w = kernels[((k * g.in_ch + c) * g.kh + dy) * g.kw + dx];
                    for oy in 0..g.oh {
                        let row = &xin[(oy * g.stride + dy) * g.wp..];
                        let orow = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            for (o, &v) in orow.iter_mut().zip(&row[dx..dx + g.ow]) {
                                *o += w * v;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += w * row[ox * g.stride + dx];
                            }
                        }
                    }
                    madds += plane as u64;
                }
            }
        }
        let b = bias[k];
        acc.iter_mut().for_each(|v| *v = *v + b);
    }
    madds
}

/// Valid cross-correlation with zero padding; no kernel flip.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if input.shape.len() != 4 || kernels.shape.len() != 4 || input.shape[1] != kernels.shape[1] {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            left: input.shape.clone(),
            right: kernels.shape.clone(),
        });
    }
    if bias.shape != [kernels.shape[0]] {
        return Err(TensorError::DimMismatch {
            op: "conv2d bias",
            left: kernels.shape.clone(),
            right: bias.shape.clone(),
        });
    }
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (k, kh, kw) = (kernels.shape[0], kernels.shape[2], kernels.shape[3]);
    let (oh, ow) = match (window_out(h, kh, stride, pad), window_out(w, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::Shape {
                op: "conv2d",
                shape: input.shape.clone(),
                reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} gives no output"),
            })
        }
    };
    let g = ConvGeom {
        in_ch: c,
        out_ch: k,
        kh,
        kw,
        stride,
        hp: h + 2 * pad,
        wp: w + 2 * pad,
        oh,
        ow,
    };
    let mut out = vec![T::zero(); n * k * oh * ow];
    let in_len = c * h * w;
    for (s, o) in out.chunks_mut(k * oh * ow).enumerate() {
        let xp = pad_planes(&input.data[s * in_len..(s + 1) * in_len], c, h, w, pad);
        conv_sample(&xp, &kernels.data, &bias.data, &g, o);
    }
    Ok(Tensor {
        shape: vec![n, k, oh, ow],
        data: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Result of a pooling pass. `argmax` holds, for max pooling, the flat
/// input index that produced each output element.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

/// Pools every `H×W` plane of an `[N,C,H,W]` tensor. Max-pool ties resolve
/// to the first element in row-major window order.
pub fn pool2d<T: Real>(
    input: &Tensor<T>,
    kind: PoolKind,
    size: usize,
    stride: usize,
) -> Result<Pooled<T>> {
    let (planes, h, w) = match input.shape.len() {
        2 => (1, input.shape[0], input.shape[1]),
        4 => (
            input.shape[0] * input.shape[1],
            input.shape[2],
            input.shape[3],
        ),
        _ => {
            return Err(TensorError::Shape {
                op: "pool2d",
                shape: input.shape.clone(),
                reason: "expects [N,C,H,W] or [H,W]".into(),
            })
        }
    };
    let (oh, ow) = match (window_out(h, size, stride, 0), window_out(w, size, stride, 0)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::Shape {
                op: "pool2d",
                shape: input.shape.clone(),
                reason: format!("window {size} stride {stride} does not fit"),
            })
        }
    };
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = (kind == PoolKind::Max).then(|| vec![0usize; planes * oh * ow]);
    let inv = T::from_f64(1.0 / (size * size) as f64);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (p * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                if input.data[idx] > input.data[best] {
                                    best = idx;
                                }
                            }
                        }
                        out[o] = input.data[best];
                        if let Some(a) = arg.as_mut() {
                            a[o] = best;
                        }
                    }
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for dy in 0..size {
                            for dx in 0..size {
                                s += input.data[base + (oy * stride + dy) * w + ox * stride + dx];
                            }
                        }
                        out[o] = s * inv;
                    }
                }
            }
        }
    }
    let mut shape = input.shape.clone();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(Pooled {
        output: Tensor { shape, data: out },
        argmax: arg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationMode {
    Value,
    Derivative,
}

impl ActivationKind {
    pub fn value<T: Real>(self, x: T) -> T {
        match self {
            ActivationKind::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`; `relu'(0)` is 0.
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            ActivationKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

pub fn activate<T: Real>(x: &Tensor<T>, kind: ActivationKind, mode: ActivationMode) -> Tensor<T> {
    match mode {
        ActivationMode::Value => x.map(|v| kind.value(v)),
        ActivationMode::Derivative => x.map(|v| kind.derivative(v)),
    }
}

/// Per-sample cross-entropy of one logit row, with max subtraction.
/// Writes the softmax probabilities into `probs`.
pub(crate) fn softmax_row<T: Real>(logits: &[T], label: usize, probs: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    let inv = T::one() / sum;
    probs.iter_mut().for_each(|p| *p *= inv);
    sum.ln() - (logits[label] - max)
}

/// Mean of per-sample losses, summed in index order in `f64`.
pub(crate) fn mean_loss<T: Real>(per_sample: &[T]) -> f64 {
    let mut s = 0.0f64;
    for &l in per_sample {
        s += l.as_f64();
    }
    s / per_sample.len() as f64
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(index) => Err(TensorError::Label {
            index,
            label: labels[index],
            classes,
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct SoftmaxCe<T> {
    pub loss: f64,
    pub probs: Tensor<T>,
    pub dlogits: Tensor<T>,
}

/// Softmax cross-entropy with mean reduction; `dlogits = (probs − onehot)/N`.
pub fn softmax_ce<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxCe<T>> {
    if logits.shape.len() != 2 || logits.shape[0] != labels.len() {
        return Err(TensorError::DimMismatch {
            op: "softmax_ce",
            left: logits.shape.clone(),
            right: vec![labels.len()],
        });
    }
    let (n, c) = (logits.shape[0], logits.shape[1]);
    check_labels(labels, c)?;
    let mut probs = vec![T::zero(); n * c];
    let mut per = Vec::with_capacity(n);
    for i in 0..n {
        per.push(softmax_row(
            &logits.data[i * c..(i + 1) * c],
            labels[i],
            &mut probs[i * c..(i + 1) * c],
        ));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut dl = probs.clone();
    for i in 0..n {
        dl[i * c + labels[i]] -= T::one();
    }
    dl.iter_mut().for_each(|v| *v *= inv_n);
    Ok(SoftmaxCe {
        loss: mean_loss(&per),
        probs: Tensor {
            shape: vec![n, c],
            data: probs,
        },
        dlogits: Tensor {
            shape: vec![n, c],
            data: dl,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.data()[i * k + t] * b.data()[t * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [k, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for s in 0..n {
            for ko in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        0.0
                                    } else {
                                        x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                    };
                                    acc += w.data()[((ko * c + ci) * kh + dy) * kw + dx] * v;
                                }
                            }
                        }
                        out.push(acc + b[ko]);
                    }
                }
            }
        }
        (vec![n, k, oh, ow], out)
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0f32], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 3], &mut rng);
        let mut eye = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        assert_eq!(matmul(&eye, &x).unwrap(), x);
    }

    #[test]
    fn matmul_matches_naive_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (r, k, c) in [(5, 7, 3), (9, 13, 17), (1, 1, 1), (4, 3, 2), (7, 64, 33)] {
            let a = random(&[r, k], &mut rng);
            let b = random(&[k, c], &mut rng);
            assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).as_slice());
        }
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            TensorError::DimMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::zeros(&[2, 2, 6, 6]);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 36) % 3]);
        }
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (stride, pad) in [(1, 0), (1, 2), (2, 1), (3, 0)] {
            let x = random(&[2, 3, 8, 8], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let y = conv2d(&x, &k, &b, stride, pad).unwrap();
            let (shape, want) = naive_conv(&x, &k, b.data(), stride, pad);
            assert_eq!(y.shape(), shape.as_slice());
            assert_eq!(y.data(), want.as_slice(), "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(matches!(conv2d(&x, &k, &b, 1, 0), Err(TensorError::Shape { .. })));
        assert!(conv2d(&x, &k, &b, 1, 1).is_ok());
    }

    #[test]
    fn pooling_cases() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let m = pool2d(&x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(m.output.data(), &[4.0]);
        // flat index 3 is (row 1, col 1)
        assert_eq!(m.argmax.unwrap(), vec![3]);
        let a = pool2d(&x, PoolKind::Avg, 2, 2).unwrap();
        assert_eq!(a.output.data(), &[2.5]);
        assert!(a.argmax.is_none());

        let c = Tensor::full(&[2, 3, 4, 4], 0.75f32);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let p = pool2d(&c, kind, 2, 2).unwrap();
            assert_eq!(p.output.shape(), &[2, 3, 2, 2]);
            assert!(p.output.data().iter().all(|&v| v == 0.75));
        }
        assert!(pool2d(&x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let r = activate(&x, ActivationKind::Relu, ActivationMode::Value);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let d = activate(&x, ActivationKind::Relu, ActivationMode::Derivative);
        assert_eq!(d.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(ActivationKind::Tanh.value(0.0f64), 0.0);
        assert_eq!(ActivationKind::Tanh.derivative(0.0f64), 1.0);
    }

    #[test]
    fn softmax_ce_two_class() {
        let z = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        let s = softmax_ce(&z, &[0]).unwrap();
        assert!((s.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(s.probs.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ce_uniform_ten_classes() {
        let z = Tensor::full(&[3, 10], 1.5f32);
        let s = softmax_ce(&z, &[0, 4, 9]).unwrap();
        assert!((s.loss - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = random(&[4, 5], &mut rng);
        let labels = [1, 0, 4, 2];
        let s = softmax_ce(&z, &labels).unwrap();
        let h = 1e-5;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (softmax_ce(&zp, &labels).unwrap().loss - softmax_ce(&zm, &labels).unwrap().loss)
                / (2.0 * h);
            assert!((fd - s.dlogits.data()[i]).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn softmax_ce_label_error() {
        let z = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(
            softmax_ce(&z, &[0, 3]).unwrap_err(),
            TensorError::Label {
                index: 1,
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let z = Tensor::new(vec![1, 3], vec![1000.0f32, 0.0, -1000.0]).unwrap();
        let s = softmax_ce(&z, &[0]).unwrap();
        assert!(s.loss.is_finite() && s.loss < 1e-6);
        assert!(s.probs.all_finite());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }
}
