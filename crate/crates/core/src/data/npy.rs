//! NPY v1/v2/v3 arrays in C order with little-endian (or byte) payloads.

use std::path::Path;

use super::{io_err, DataError};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NpyData {
    fn descr(&self) -> &'static str {
        match self {
            NpyData::U8(_) => "|u1",
            NpyData::I32(_) => "<i4",
            NpyData::I64(_) => "<i8",
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::U8(v) => v.len(),
            NpyData::I32(v) => v.len(),
            NpyData::I64(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    /// Values as `f32`; `u8` payloads are scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor<f32>, DataError> {
        let values: Vec<f32> = match &self.data {
            NpyData::U8(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
            NpyData::I32(v) => v.iter().map(|&x| x as f32).collect(),
            NpyData::I64(v) => v.iter().map(|&x| x as f32).collect(),
            NpyData::F32(v) => v.clone(),
            NpyData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        let shape = if self.shape.is_empty() { vec![1] } else { self.shape.clone() };
        Ok(Tensor::new(shape, values)?)
    }

    /// Integer view for label arrays; floats must be integral.
    pub fn to_labels(&self) -> Result<Vec<i64>, DataError> {
        let bad = |v: f64| DataError::Malformed {
            what: "NPY labels".into(),
            reason: format!("non-integral label {v}"),
        };
        match &self.data {
            NpyData::U8(v) => Ok(v.iter().map(|&x| x as i64).collect()),
            NpyData::I32(v) => Ok(v.iter().map(|&x| x as i64).collect()),
            NpyData::I64(v) => Ok(v.clone()),
            NpyData::F32(v) => v
                .iter()
                .map(|&x| if x.fract() == 0.0 { Ok(x as i64) } else { Err(bad(x as f64)) })
                .collect(),
            NpyData::F64(v) => v
                .iter()
                .map(|&x| if x.fract() == 0.0 { Ok(x as i64) } else { Err(bad(x)) })
                .collect(),
        }
    }
}

fn malformed(reason: impl Into<String>) -> DataError {
    DataError::Malformed {
        what: "NPY header".into(),
        reason: reason.into(),
    }
}

/// Value text following `'key':` in the header dict.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str, DataError> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| malformed(format!("missing '{key}'")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

fn parse_header(header: &str) -> Result<(String, bool, Vec<usize>), DataError> {
    let descr = dict_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| malformed("descr is not a string"))?
        .to_string();

    let fortran = dict_value(header, "fortran_order")?;
    let fortran = if fortran.starts_with("True") {
        true
    } else if fortran.starts_with("False") {
        false
    } else {
        return Err(malformed("fortran_order is not a bool"));
    };

    let shape = dict_value(header, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| malformed("shape is not a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| malformed(format!("bad dimension '{s}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((descr, fortran, shape))
}

pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray, DataError> {
    let truncated = |declared: usize| DataError::Truncated {
        what: "NPY".into(),
        declared: declared as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < MAGIC.len() + 2 {
        return Err(truncated(MAGIC.len() + 4));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(DataError::BadMagic {
            what: "NPY".into(),
            expected: u32::from_be_bytes([0x93, b'N', b'U', b'M']),
            found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
        });
    }
    let major = bytes[6];
    let (len_at, len_size) = match major {
        1 => (8, 2),
        2 | 3 => (8, 4),
        v => return Err(DataError::Unsupported(format!("NPY version {v}"))),
    };
    if bytes.len() < len_at + len_size {
        return Err(truncated(len_at + len_size));
    }
    let header_len = if len_size == 2 {
        u16::from_le_bytes([bytes[8], bytes[9]]) as usize
    } else {
        u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize
    };
    let data_at = len_at + len_size + header_len;
    if bytes.len() < data_at {
        return Err(truncated(data_at));
    }
    let header = std::str::from_utf8(&bytes[len_at + len_size..data_at])
        .map_err(|_| malformed("header is not UTF-8"))?;
    let (descr, fortran, shape) = parse_header(header)?;
    if fortran {
        return Err(DataError::Unsupported("Fortran-order NPY arrays".into()));
    }
    let width = match descr.as_str() {
        "|u1" | "<u1" | "u1" => 1,
        "<i4" | "<f4" => 4,
        "<i8" | "<f8" => 8,
        other => return Err(DataError::Unsupported(format!("NPY dtype '{other}'"))),
    };
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(format!("shape {shape:?} overflows")))?;
    let declared = count
        .checked_mul(width)
        .ok_or_else(|| malformed(format!("shape {shape:?} overflows")))?;
    let payload = &bytes[data_at..];
    if payload.len() != declared {
        return Err(DataError::Truncated {
            what: "NPY payload".into(),
            declared: declared as u64,
            found: payload.len() as u64,
        });
    }
    let chunks = payload.chunks_exact(width.max(1));
    let data = match descr.as_str() {
        "<i4" => NpyData::I32(chunks.map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect()),
        "<i8" => NpyData::I64(chunks.map(|c| i64::from_le_bytes(c.try_into().expect("8"))).collect()),
        "<f4" => NpyData::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
        "<f8" => NpyData::F64(chunks.map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        _ => NpyData::U8(payload.to_vec()),
    };
    Ok(NpyArray { shape, data })
}

/// Encodes as NPY v1 (v2 if the header outgrows 16 bits).
pub fn encode_npy(array: &NpyArray) -> Vec<u8> {
    let dims: Vec<String> = array.shape.iter().map(usize::to_string).collect();
    let shape = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.join(", ")),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        array.data.descr()
    );
    let v1 = header.len() + 11 < u16::MAX as usize;
    let prefix = if v1 { 10 } else { 12 };
    // Pad with spaces so the payload starts on a 64-byte boundary.
    let total = (prefix + header.len() + 1).div_ceil(64) * 64;
    header.push_str(&" ".repeat(total - prefix - header.len() - 1));
    header.push('\n');

    let mut out = Vec::with_capacity(total + array.data.len() * 8);
    out.extend_from_slice(MAGIC);
    if v1 {
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    } else {
        out.extend_from_slice(&[2, 0]);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(header.as_bytes());
    match &array.data {
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn read_npy(path: &Path) -> Result<NpyArray, DataError> {
    parse_npy(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_npy(path: &Path, array: &NpyArray) -> Result<(), DataError> {
    std::fs::write(path, encode_npy(array)).map_err(io_err(path))
}

/// Loads an array as a tensor with the header-declared shape.
pub fn load_npy(path: &Path) -> Result<Tensor<f32>, DataError> {
    read_npy(path)?.to_tensor()
}

/// Brings image stacks to `[N, C, H, W]`: `[N, H, W]` gains a channel axis and
/// channel-last `[N, H, W, C]` (C of 1 or 3) is transposed.
pub fn to_nchw(t: Tensor<f32>) -> Result<Tensor<f32>, DataError> {
    let s = t.shape().to_vec();
    match s.len() {
        3 => Ok(t.reshape(vec![s[0], 1, s[1], s[2]])?),
        4 if matches!(s[3], 1 | 3) && !matches!(s[1], 1 | 3) => {
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let src = t.data();
            let mut out = vec![0.0f32; src.len()];
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            out[((i * c + ch) * h + y) * w + x] = src[((i * h + y) * w + x) * c + ch];
                        }
                    }
                }
            }
            Ok(Tensor::new(vec![n, c, h, w], out)?)
        }
        4 => Ok(t),
        _ => Err(DataError::Malformed {
            what: "image array".into(),
            reason: format!("cannot interpret shape {s:?} as images"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f64_fixture_parses_exactly() {
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        let mut header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 2), }".to_string();
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        bytes.extend((header.len() as u16).to_le_bytes());
        bytes.extend(header.as_bytes());
        for v in [1.0f64, 2.0, 3.0, 4.0] {
            bytes.extend(v.to_le_bytes());
        }
        let a = parse_npy(&bytes).unwrap();
        assert_eq!(a.shape, [2, 2]);
        assert_eq!(a.data, NpyData::F64(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(encode_npy(&a), bytes);
    }

    #[test]
    fn fortran_order_and_odd_dtypes_rejected() {
        let a = NpyArray {
            shape: vec![2],
            data: NpyData::F32(vec![1.0, 2.0]),
        };
        let bytes = encode_npy(&a);
        let swap = |from: &[u8], to: &[u8]| {
            let at = bytes.windows(from.len()).position(|w| w == from).unwrap();
            let mut out = bytes.clone();
            out[at..at + to.len()].copy_from_slice(to);
            out
        };
        let fortran = swap(b"'fortran_order': False", b"'fortran_order': True ");
        assert!(matches!(parse_npy(&fortran), Err(DataError::Unsupported(_))));
        let complex = swap(b"<f4", b"<c8");
        assert!(matches!(parse_npy(&complex), Err(DataError::Unsupported(_))));
        let big_endian = swap(b"<f4", b">f4");
        assert!(matches!(parse_npy(&big_endian), Err(DataError::Unsupported(_))));
    }

    #[test]
    fn scalar_and_vector_shapes() {
        let v = NpyArray {
            shape: vec![3],
            data: NpyData::I64(vec![-1, 0, 7]),
        };
        let back = parse_npy(&encode_npy(&v)).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_labels().unwrap(), [-1, 0, 7]);
    }

    #[test]
    fn nhwc_becomes_nchw() {
        let t = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let c = to_nchw(t).unwrap();
        assert_eq!(c.shape(), [1, 3, 2, 2]);
        assert_eq!(&c.data()[..4], &[0.0, 3.0, 6.0, 9.0]);
        let flat = to_nchw(Tensor::zeros(&[5, 28, 28])).unwrap();
        assert_eq!(flat.shape(), [5, 1, 28, 28]);
    }

    proptest! {
        #[test]
        fn u8_round_trip(n in 1usize..5, h in 1usize..6, data in proptest::collection::vec(any::<u8>(), 150)) {
            let len = n * h * 5;
            let a = NpyArray { shape: vec![n, h, 5], data: NpyData::U8(data[..len].to_vec()) };
            let bytes = encode_npy(&a);
            prop_assert_eq!(&parse_npy(&bytes).unwrap(), &a);
            let t = a.to_tensor().unwrap();
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn truncations_error(cut in 0usize..200) {
            let a = NpyArray { shape: vec![4, 4], data: NpyData::F32(vec![0.5; 16]) };
            let bytes = encode_npy(&a);
            if cut < bytes.len() {
                prop_assert!(parse_npy(&bytes[..cut]).is_err());
            }
        }
    }
}
