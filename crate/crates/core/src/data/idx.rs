//! IDX files: big-endian header, `u8` payload.
//!
//! Images use magic `0x00000803` followed by `N, rows, cols`; labels use
//! `0x00000801` followed by `N`. Gzipped files are detected by their leading
//! `1f 8b` and inflated transparently.

use std::io::Read;
use std::path::Path;

use super::{io_err, DataError, Dataset};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0803;
pub const LABELS_MAGIC: u32 = 0x0801;

/// Upper bound on inflated file size, far above the 47 MB MNIST train set.
const MAX_INFLATED: u64 = 1 << 30;

/// Reads a file, inflating it if it is gzip-compressed.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .take(MAX_INFLATED)
            .read_to_end(&mut out)
            .map_err(|e| DataError::Malformed {
                what: path.display().to_string(),
                reason: format!("gzip: {e}"),
            })?;
        return Ok(out);
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(bytes: &[u8], what: &str, magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let head = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            what: what.into(),
            declared: head as u64,
            found: bytes.len() as u64,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            what: what.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < head {
        return Err(DataError::Truncated {
            what: what.into(),
            declared: head as u64,
            found: bytes.len() as u64,
        });
    }
    Ok((0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

fn payload<'a>(bytes: &'a [u8], what: &str, offset: usize, dims: &[usize]) -> Result<&'a [u8], DataError> {
    let declared = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| DataError::Malformed {
            what: what.into(),
            reason: format!("dimensions {dims:?} overflow"),
        })?;
    let found = (bytes.len() - offset) as u64;
    if found != declared {
        return Err(DataError::Truncated {
            what: what.into(),
            declared,
            found,
        });
    }
    if dims.contains(&0) {
        return Err(DataError::Malformed {
            what: what.into(),
            reason: format!("zero dimension in {dims:?}"),
        });
    }
    Ok(&bytes[offset..])
}

/// Parses an image file into `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let dims = header(bytes, "IDX images", IMAGES_MAGIC, 3)?;
    let data = payload(bytes, "IDX images", 16, &dims)?;
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![dims[0], 1, dims[1], dims[2]], pixels)?)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let dims = header(bytes, "IDX labels", LABELS_MAGIC, 1)?;
    Ok(payload(bytes, "IDX labels", 8, &dims)?.to_vec())
}

/// Serializes `[N, 1, H, W]` pixels (rounded to `u8`) in IDX image format.
pub fn encode_images(images: &Tensor<f32>) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads a 10-class image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?)?;
    if images.rows() != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, images, labels.into_iter().map(usize::from).collect(), 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend([0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    #[test]
    fn two_image_fixture_round_trips() {
        let (img, lab) = fixture();
        let t = parse_images(&img).unwrap();
        assert_eq!(t.shape(), [2, 1, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);
        assert_eq!(parse_labels(&lab).unwrap(), [7, 3]);
        assert_eq!(encode_images(&t), img);
        assert_eq!(encode_labels(&[7, 3]), lab);
    }

    #[test]
    fn swapped_magic_is_bad_magic() {
        let (img, lab) = fixture();
        assert!(matches!(
            parse_images(&lab),
            Err(DataError::BadMagic { found: LABELS_MAGIC, .. })
        ));
        assert!(matches!(parse_labels(&img), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncation_and_excess_are_errors() {
        let (img, _) = fixture();
        for cut in 0..img.len() {
            assert!(parse_images(&img[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = img.clone();
        long.push(0);
        assert!(matches!(parse_images(&long), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture();
        std::fs::write(dir.path().join("i"), &img).unwrap();
        std::fs::write(dir.path().join("l"), encode_labels(&[1, 2, 3])).unwrap();
        let err = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 3 }));
    }

    #[test]
    fn gzip_is_transparent() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&img).unwrap();
        std::fs::write(dir.path().join("i.gz"), gz.finish().unwrap()).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        let d = load_idx(&dir.path().join("i.gz"), &dir.path().join("l")).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), [7, 3]);
    }
}
