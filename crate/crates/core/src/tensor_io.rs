//! Minimal binary tensor container.
//!
//! Layout: magic `DFTN`, `u16` version (1), `u8` dtype code, `u8` ndim,
//! `ndim` x `u64` shape, then the row-major payload. All integers and values
//! are little-endian. Dtype codes: 0 f64, 1 f32, 2 i32, 3 u8.

use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DFTN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    I32 = 2,
    U8 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::F64),
            1 => Some(Self::F32),
            2 => Some(Self::I32),
            3 => Some(Self::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 | Self::I32 => 4,
            Self::U8 => 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"DFTN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{0} bytes after the payload")]
    TrailingBytes(u64),
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl TensorError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::BadMagic(_) => 2,
            Self::Version(_) => 3,
            Self::UnknownDType(_) => 4,
            Self::Truncated { .. } => 5,
            Self::TrailingBytes(_) => 6,
            Self::DTypeMismatch { .. } => 7,
            Self::Shape(_) => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F64(_) => DType::F64,
            Self::F32(_) => DType::F32,
            Self::I32(_) => DType::I32,
            Self::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::F32(v) => v.len(),
            Self::I32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if shape.len() > u8::MAX as usize {
            return Err(TensorError::Shape(format!("{} dimensions", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::U8(values))
    }

    pub fn i32(shape: Vec<usize>, values: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::I32(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    fn mismatch(&self, expected: DType) -> TensorError {
        TensorError::DTypeMismatch {
            expected,
            found: self.dtype(),
        }
    }

    pub fn into_f64(self) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
        match self.data {
            TensorData::F64(v) => Ok((self.shape, v)),
            _ => Err(self.mismatch(DType::F64)),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>), TensorError> {
        match self.data {
            TensorData::U8(v) => Ok((self.shape, v)),
            _ => Err(self.mismatch(DType::U8)),
        }
    }

    pub fn into_i32(self) -> Result<(Vec<usize>, Vec<i32>), TensorError> {
        match self.data {
            TensorData::I32(v) => Ok((self.shape, v)),
            _ => Err(self.mismatch(DType::I32)),
        }
    }

    /// Values widened to f64 from any dtype.
    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.shape.len() + t.data.len() * t.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype() as u8);
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    out
}

/// Reads exactly `buf.len()` bytes or reports how many were available.
fn fill(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), TensorError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(TensorError::Truncated {
                    what,
                    expected: buf.len() as u64,
                    actual: got as u64,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Decodes a container from a reader. The header is validated before any
/// payload byte is read.
pub fn read_from(r: &mut impl Read) -> Result<Tensor, TensorError> {
    let mut head = [0u8; 8];
    fill(r, &mut head, "header")?;
    let magic = [head[0], head[1], head[2], head[3]];
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(TensorError::Version(version));
    }
    let dtype = DType::from_code(head[6]).ok_or(TensorError::UnknownDType(head[6]))?;
    let ndim = head[7] as usize;
    let mut dims = vec![0u8; 8 * ndim];
    fill(r, &mut dims, "shape")?;
    let shape: Vec<usize> = dims
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| TensorError::Shape(format!("shape {shape:?} overflows")))?;

    let mut payload = Vec::new();
    r.take(n as u64).read_to_end(&mut payload)?;
    if payload.len() < n {
        return Err(TensorError::Truncated {
            what: "payload",
            expected: n as u64,
            actual: payload.len() as u64,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TensorError::TrailingBytes(rest.len() as u64));
    }
    let data = match dtype {
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload),
    };
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, TensorError> {
    read_from(&mut &bytes[..])
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    read_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), TensorError> {
    atomic_write(path, &encode(t))?;
    Ok(())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let cases = [
            Tensor::f64(vec![3, 4], (0..12).map(|i| i as f64 * -0.1 + f64::EPSILON).collect()).unwrap(),
            Tensor::new(vec![2, 2], TensorData::F32(vec![1.5, -0.0, f32::MAX, 3.0])).unwrap(),
            Tensor::i32(vec![3], vec![i32::MIN, 0, 7]).unwrap(),
            Tensor::u8(vec![1, 2, 2], vec![0, 255, 3, 4]).unwrap(),
        ];
        for t in cases {
            assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }

    #[test]
    fn nan_bits_preserved() {
        let t = Tensor::f64(vec![2], vec![f64::NAN, -f64::INFINITY]).unwrap();
        let back = decode(&encode(&t)).unwrap().into_f64().unwrap().1;
        assert_eq!(back[0].to_bits(), f64::NAN.to_bits());
        assert_eq!(back[1], -f64::INFINITY);
    }

    #[test]
    fn scalar() {
        let t = Tensor::f64(vec![], vec![2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 8 + 8);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor::u8(vec![2], vec![9, 8]).unwrap());
        assert_eq!(&bytes[..4], b"DFTN");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 3);
        assert_eq!(bytes[7], 1);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..], &[9, 8]);
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let bytes = encode(&Tensor::f64(vec![3, 4], vec![0.0; 12]).unwrap());
        let cut = &bytes[..bytes.len() - 10];
        match decode(cut).unwrap_err() {
            TensorError::Truncated { what, expected, actual } => {
                assert_eq!(what, "payload");
                assert_eq!(expected, 96);
                assert_eq!(actual, 86);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(decode(&bytes[..5]).unwrap_err().to_string().contains("expected 8 bytes, found 5"));
    }

    #[test]
    fn distinct_error_codes() {
        let good = encode(&Tensor::f64(vec![1], vec![1.0]).unwrap());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_dtype = good.clone();
        bad_dtype[6] = 9;
        let mut extra = good.clone();
        extra.push(0);
        let errs = [
            decode(&bad_magic).unwrap_err(),
            decode(&bad_dtype).unwrap_err(),
            decode(&good[..12]).unwrap_err(),
            decode(&extra).unwrap_err(),
            decode(&good).unwrap().into_u8().unwrap_err(),
        ];
        let codes: Vec<u8> = errs.iter().map(|e| e.code()).collect();
        assert_eq!(codes, vec![2, 4, 5, 6, 7]);
    }

    #[test]
    fn file_round_trip_is_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dftn");
        let t = Tensor::i32(vec![2, 1], vec![4, -4]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("x.dftn")]);
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::f64(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
