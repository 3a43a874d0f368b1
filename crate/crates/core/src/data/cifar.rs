//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32×32 planes.

use std::path::Path;

use super::{io_err, DataError, Dataset};
use crate::tensor::Tensor;

pub const RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<usize>), DataError> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(DataError::Truncated {
            what: "CIFAR-10 batch".into(),
            declared: (bytes.len().div_ceil(RECORD).max(1) * RECORD) as u64,
            found: bytes.len() as u64,
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD - 1));
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(DataError::Label {
                index: i,
                label: rec[0] as i64,
                classes: 10,
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], pixels)?, labels))
}

/// Loads and concatenates batch files in the given order.
pub fn load_cifar10(paths: &[&Path]) -> Result<Dataset, DataError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (t, l) = parse_cifar10(&std::fs::read(p).map_err(io_err(*p))?)?;
        images.push(t);
        labels.extend(l);
    }
    if images.is_empty() {
        return Err(DataError::Malformed {
            what: "CIFAR-10".into(),
            reason: "no batch files given".into(),
        });
    }
    Dataset::new("cifar10", Tensor::concat_rows(&images)?, labels, 10)
}
