//! Dense row-major tensors and the `NVAT1` binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   6 bytes  "NVAT1\0"
//! dtype   1 byte   1 = f32, 2 = f64
//! ndim    u32
//! shape   ndim x u64
//! payload product(shape) scalars, row-major, little-endian
//! ```
//!
//! A rank-0 tensor has an empty shape and exactly one element.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"NVAT1\0";
const HEADER_FIXED: usize = 6 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// Dense N-dimensional array with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} has a zero dimension"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} holds {numel} elements but data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let finite = match &data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        };
        if !finite {
            return Err(Error::InvalidTensor("non-finite element".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_f64(Vec::new(), vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f64(shape, vec![0.0; n])
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Copies the payload into a `Vec<f64>` regardless of stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn into_f64(self) -> (Vec<usize>, Vec<f64>) {
        let data = match self.data {
            TensorData::F32(v) => v.into_iter().map(|x| x as f64).collect(),
            TensorData::F64(v) => v,
        };
        (self.shape, data)
    }

    pub fn to_f32(&self) -> Tensor {
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::F32(data),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_FIXED + 8 * self.shape.len() + self.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let header = parse_header(bytes, path)?;
        let numel: u64 = header.shape.iter().map(|&d| d as u64).product();
        let expected = numel * header.dtype.size() as u64;
        let payload = &bytes[header.header_len..];
        if payload.len() as u64 != expected {
            return Err(Error::TruncatedTensor {
                path: path.to_path_buf(),
                expected,
                found: payload.len() as u64,
            });
        }
        let data = match header.dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(header.shape, data)
    }
}

/// Shape/dtype read from a tensor file without the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub header_len: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<TensorHeader> {
    if bytes.len() < HEADER_FIXED || &bytes[..6] != MAGIC {
        return Err(Error::NotATensor(path.to_path_buf()));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::NotATensor(path.to_path_buf()))?;
    let ndim = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let header_len = HEADER_FIXED + 8 * ndim;
    if bytes.len() < header_len {
        return Err(Error::TruncatedTensor {
            path: path.to_path_buf(),
            expected: header_len as u64,
            found: bytes.len() as u64,
        });
    }
    let shape = bytes[HEADER_FIXED..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect::<Vec<_>>();
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "{}: zero dimension in shape {shape:?}",
            path.display()
        )));
    }
    Ok(TensorHeader {
        dtype,
        shape,
        header_len,
    })
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

/// Reads only the header and checks that the file length matches it.
pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut fixed = [0u8; HEADER_FIXED];
    if f.read_exact(&mut fixed).is_err() {
        return Err(Error::NotATensor(path.to_path_buf()));
    }
    let ndim = u32::from_le_bytes(fixed[7..11].try_into().unwrap()) as usize;
    let mut bytes = fixed.to_vec();
    let mut dims = vec![0u8; 8 * ndim.min(64)];
    if &fixed[..6] == MAGIC && f.read_exact(&mut dims).is_ok() {
        bytes.extend_from_slice(&dims);
    }
    let header = parse_header(&bytes, path)?;
    let numel: u64 = header.shape.iter().map(|&d| d as u64).product();
    let expected = numel * header.dtype.size() as u64;
    let found = file_len - header.header_len as u64;
    if found != expected {
        return Err(Error::TruncatedTensor {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_f32_is_43_bytes() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nvat");
        write_tensor(&t, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 43);
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn scalar_payload_is_four_bytes() {
        let t = Tensor::from_f32(vec![], vec![5.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len() - HEADER_FIXED, 4);
        assert_eq!(&bytes[HEADER_FIXED..], &5.0f32.to_le_bytes());
    }

    // Hand-assembled bytes: f64 tensor of shape [3] holding 1.5, -2, 0.25.
    const GOLDEN: [u8; 43] = [
        b'N', b'V', b'A', b'T', b'1', 0, // magic
        2, // f64
        1, 0, 0, 0, // ndim
        3, 0, 0, 0, 0, 0, 0, 0, // shape[0]
        0, 0, 0, 0, 0, 0, 0xF8, 0x3F, // 1.5
        0, 0, 0, 0, 0, 0, 0, 0xC0, // -2.0
        0, 0, 0, 0, 0, 0, 0xD0, 0x3F, // 0.25
    ];

    #[test]
    fn golden_bytes_parse() {
        let t = Tensor::from_bytes(&GOLDEN, Path::new("golden")).unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.as_f64().unwrap(), &[1.5, -2.0, 0.25]);
        assert_eq!(t.to_bytes(), GOLDEN.to_vec());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = GOLDEN.to_vec();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = Tensor::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("not a tensor file"), "{err}");
    }

    #[test]
    fn short_payload_rejected() {
        // header declares 10 f32 elements, payload carries 8
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&10u64.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 8 * 4));
        let err = Tensor::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("truncated tensor"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nvat");
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor_header(&p), Err(Error::TruncatedTensor { .. })));
    }

    #[test]
    fn header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.nvat");
        let t = Tensor::zeros(vec![2, 3, 4]).unwrap();
        write_tensor(&t, &p).unwrap();
        let h = read_tensor_header(&p).unwrap();
        assert_eq!(h.shape, vec![2, 3, 4]);
        assert_eq!(h.dtype, DType::F64);
    }

    #[test]
    fn rejects_inconsistent_shape_and_nan() {
        assert!(Tensor::from_f64(vec![3], vec![1.0, 2.0]).is_err());
        assert!(Tensor::from_f64(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::from_f64(vec![0], vec![]).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (proptest::collection::vec(1usize..4, 1..=5), any::<bool>()).prop_flat_map(|(shape, f32)| {
            let n: usize = shape.iter().product();
            proptest::collection::vec(-1e6f64..1e6, n).prop_map(move |v| {
                if f32 {
                    Tensor::from_f32(shape.clone(), v.iter().map(|&x| x as f32).collect()).unwrap()
                } else {
                    Tensor::from_f64(shape.clone(), v).unwrap()
                }
            })
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(t in arb_tensor()) {
            let back = Tensor::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), t.to_bytes());
            prop_assert_eq!(back, t);
        }
    }
}
