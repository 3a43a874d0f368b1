//! Image datasets: file formats, download cache, batching, augmentation
//! and synthetic corruptions.
//!
//! Pixels are stored as `f32` in `[0, 1]` with layout `[N, C, H, W]`.

pub mod augment;
pub mod cifar;
pub mod corrupt;
pub mod fetch;
pub mod idx;
pub mod npy;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentSpec};
pub use corrupt::{apply_corruption, corrupt, Corruption, CorruptionKind};
pub use fetch::{fetch, FetchReport, Manifest, ManifestEntry};
pub use idx::load_idx;
pub use npy::{load_npy, NpyArray};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic {
        what: String,
        expected: u32,
        found: u32,
    },
    #[error("{what} truncated: header declares {declared} payload bytes, found {found}")]
    Truncated {
        what: String,
        declared: u64,
        found: u64,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    Label {
        index: usize,
        label: i64,
        classes: usize,
    },
    #[error("checksum mismatch for {file}: expected {expected}, got {actual} (moved to {quarantined})")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
        quarantined: PathBuf,
    },
    #[error("download of {url} failed after {attempts} attempts: {reason}")]
    Http {
        url: String,
        attempts: u32,
        reason: String,
    },
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("corruption '{0}' is not generated natively; load it from a precomputed NPY archive")]
    UsePrecomputed(String),
    #[error("unknown corruption '{0}'")]
    UnknownCorruption(String),
    #[error("severity {0} outside 1..=5")]
    Severity(u8),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// Per-channel statistics of the stored pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Labelled images, immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    name: String,
    num_classes: usize,
    normalization: Normalization,
}

impl Dataset {
    /// Validates shapes, label range and pixel range.
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let name = name.into();
        if images.shape().len() != 4 {
            return Err(DataError::Malformed {
                what: name,
                reason: format!("images must be [N,C,H,W], got {:?}", images.shape()),
            });
        }
        if images.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::Label {
                index,
                label: label as i64,
                classes: num_classes,
            });
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Malformed {
                what: name,
                reason: format!("pixel value {v} outside [0,1]"),
            });
        }
        let normalization = channel_stats(&images);
        Ok(Self {
            images,
            labels,
            name,
            num_classes,
            normalization,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self, DataError> {
        let (images, labels) = self.gather(idx);
        Dataset::new(self.name.clone(), images, labels, self.num_classes)
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `n` distinct samples chosen uniformly, kept in ascending index order.
    pub fn subset(&self, n: usize, rng: &RngStream) -> Result<Self, DataError> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx = rand::seq::index::sample(&mut rng.rng(), self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

fn channel_stats(images: &Tensor<f32>) -> Normalization {
    let s = images.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut sum, mut sq) = (0.0f64, 0.0f64);
        for i in 0..n {
            let start = (i * c + ch) * plane;
            for &v in &images.data()[start..start + plane] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let count = (n * plane) as f64;
        let m = sum / count;
        mean.push(m as f32);
        std.push((sq / count - m * m).max(0.0).sqrt() as f32);
    }
    Normalization { mean, std }
}

/// Partitions `0..data.len()` into consecutive batches; the last may be short.
pub fn batches(data: &Dataset, batch_size: usize, shuffle: bool, rng: &RngStream) -> Vec<Vec<usize>> {
    index_batches(data.len(), batch_size, shuffle, rng)
}

pub fn index_batches(n: usize, batch_size: usize, shuffle: bool, rng: &RngStream) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng.rng());
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Loads one of the IDX datasets from `dir`, accepting raw or gzipped files.
pub fn load_idx_dir(dir: &std::path::Path, name: &str, train: bool) -> Result<Dataset, DataError> {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let raw = dir.join(&stem);
        if raw.exists() {
            raw
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    let images = pick(format!("{prefix}-images-idx3-ubyte"));
    let labels = pick(format!("{prefix}-labels-idx1-ubyte"));
    let split = if train { "train" } else { "test" };
    Ok(load_idx(&images, &labels)?.with_name(format!("{name}-{split}")))
}

/// Files backing one split of a named dataset inside `dir`.
pub fn split_files(name: &str, dir: &Path, train: bool) -> Result<Vec<PathBuf>, DataError> {
    match name {
        "mnist" | "fashion_mnist" => {
            let prefix = if train { "train" } else { "t10k" };
            Ok(["images-idx3-ubyte", "labels-idx1-ubyte"]
                .iter()
                .map(|kind| {
                    let raw = dir.join(format!("{prefix}-{kind}"));
                    if raw.exists() {
                        raw
                    } else {
                        dir.join(format!("{prefix}-{kind}.gz"))
                    }
                })
                .collect())
        }
        "cifar10" => {
            let base = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir.to_path_buf()
            };
            Ok(if train {
                (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect()
            } else {
                vec![base.join("test_batch.bin")]
            })
        }
        other => Err(DataError::UnknownDataset(other.to_string())),
    }
}

/// Loads the train or test split of `name` (`mnist`, `fashion_mnist`,
/// `cifar10`) from `dir`.
pub fn load_split(name: &str, dir: &Path, train: bool) -> Result<Dataset, DataError> {
    let files = split_files(name, dir, train)?;
    let split = if train { "train" } else { "test" };
    let data = match name {
        "cifar10" => {
            let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            cifar::load_cifar10(&refs)?
        }
        _ => idx::load_idx(&files[0], &files[1])?,
    };
    Ok(data.with_name(format!("{name}-{split}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|i| (i % 5) as f32 / 4.0).collect()).unwrap();
        Dataset::new("tiny", images, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn batch_sizes() {
        let d = tiny(10);
        let b = batches(&d, 3, false, &RngStream::new(0));
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let d = tiny(50);
        let a = batches(&d, 7, true, &RngStream::new(3));
        let b = batches(&d, 7, true, &RngStream::new(3));
        assert_eq!(a, b);
        let mut flat = a.concat();
        assert_ne!(flat, (0..50).collect::<Vec<_>>());
        flat.sort_unstable();
        assert_eq!(flat, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_labels_and_pixels() {
        let images = Tensor::full(&[2, 1, 2, 2], 0.5f32);
        assert!(matches!(
            Dataset::new("x", images.clone(), vec![0, 3], 3),
            Err(DataError::Label { index: 1, .. })
        ));
        assert!(matches!(
            Dataset::new("x", images, vec![0], 3),
            Err(DataError::CountMismatch { .. })
        ));
        let bright = Tensor::full(&[1, 1, 2, 2], 1.5f32);
        assert!(Dataset::new("x", bright, vec![0], 3).is_err());
    }

    #[test]
    fn subset_is_sorted_and_seeded() {
        let d = tiny(40);
        let a = d.subset(10, &RngStream::new(1)).unwrap();
        assert_eq!(a, d.subset(10, &RngStream::new(1)).unwrap());
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn channel_stats_of_constant_image() {
        let d = Dataset::new("c", Tensor::full(&[3, 2, 2, 2], 0.25f32), vec![0, 0, 0], 1).unwrap();
        assert_eq!(d.normalization().mean, [0.25, 0.25]);
        assert_eq!(d.normalization().std, [0.0, 0.0]);
    }
}
