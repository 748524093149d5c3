//! The "TAVLO-T4" tensor framing and the keyed-tensor container built on it.
//!
//! One frame is:
//!
//! ```text
//! magic   8 bytes   b"TAVLO-T4"
//! dtype   u32 LE    1 = f32, 2 = f64, 3 = u8
//! dims    4 × u64 LE
//! payload product(dims) elements, little-endian
//! ```
//!
//! The container (`TAVLO-CK`) is a u32 entry count followed by
//! `(u32 key length, utf-8 key, T4 frame)` per entry. Entries keep insertion
//! order so a written file is byte-identical for identical content.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array4, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"TAVLO-T4";
pub const CONTAINER_MAGIC: &[u8; 8] = b"TAVLO-CK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            other => Err(Error::format("tensor header", format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A 4-dimensional tensor as it appears on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: [usize; 4],
    pub data: TensorData,
}

impl RawTensor {
    pub fn new(dims: [usize; 4], data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} hold {expected} elements but payload has {}",
                data.len()
            )));
        }
        Ok(RawTensor { dims, data })
    }

    /// Packs an arbitrary-rank f64 array, left-padding the shape with ones.
    /// Arrays of rank > 4 fold their leading axes together.
    pub fn from_f64(array: &ArrayD<f64>) -> Self {
        let dims = pad_dims(array.shape());
        let data = array.iter().copied().collect();
        RawTensor {
            dims,
            data: TensorData::F64(data),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        RawTensor {
            dims: [1, 1, 1, bytes.len()],
            data: TensorData::U8(bytes.to_vec()),
        }
    }

    /// Reinterprets as f64 with the requested shape (element counts must agree).
    pub fn to_f64(&self, shape: &[usize]) -> Result<ArrayD<f64>> {
        let values: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(shape), values)
            .map_err(|e| Error::ShapeMismatch(format!("cannot view tensor {:?} as {shape:?}: {e}", self.dims)))
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::format("tensor", "expected a u8 payload")),
        }
    }

    pub fn to_array4_f32(&self) -> Array4<f32> {
        let values: Vec<f32> = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32 / 255.0).collect(),
        };
        Array4::from_shape_vec(self.dims, values).expect("dims validated at construction")
    }
}

fn pad_dims(shape: &[usize]) -> [usize; 4] {
    let mut dims = [1usize; 4];
    if shape.len() <= 4 {
        let offset = 4 - shape.len();
        dims[offset..].copy_from_slice(shape);
    } else {
        let split = shape.len() - 3;
        dims[0] = shape[..split].iter().product();
        dims[1..].copy_from_slice(&shape[split..]);
    }
    dims
}

pub fn write_tensor<W: Write>(out: &mut W, tensor: &RawTensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(tensor.data.dtype() as u32).to_le_bytes())?;
    for d in tensor.dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    match &tensor.data {
        TensorData::F32(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::U8(v) => out.write_all(v)?,
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::format("tensor stream", format!("truncated while reading {what}: {e}")))
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<RawTensor> {
    let mut magic = [0u8; 8];
    read_exact(input, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format("tensor header", "bad magic (expected TAVLO-T4)"));
    }
    let dtype = DType::from_code(read_u32(input, "dtype")?)?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = usize::try_from(read_u64(input, "dims")?)
            .map_err(|_| Error::format("tensor header", "dimension overflows usize"))?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor header", "element count overflows"))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
        DType::U8 => 1,
    };
    let mut payload = vec![0u8; count * width];
    read_exact(input, &mut payload, "payload")?;
    let data = match dtype {
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
        DType::U8 => TensorData::U8(payload),
    };
    RawTensor::new(dims, data)
}

pub fn save_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_tensor(&mut out, tensor).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<RawTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file))
}

/// Ordered keyed-tensor container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, RawTensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry, keeping the original position on replace.
    pub fn insert(&mut self, key: impl Into<String>, tensor: RawTensor) {
        let key = key.into();
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = tensor;
        } else {
            self.entries.push((key, tensor));
        }
    }

    pub fn get(&self, key: &str) -> Option<&RawTensor> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(CONTAINER_MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (key, tensor) in &self.entries {
            out.write_all(&(key.len() as u32).to_le_bytes())?;
            out.write_all(key.as_bytes())?;
            write_tensor(out, tensor)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(input, &mut magic, "container magic")?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::format("container header", "bad magic (expected TAVLO-CK)"));
        }
        let n = read_u32(input, "entry count")? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let key_len = read_u32(input, "key length")? as usize;
            let mut key = vec![0u8; key_len];
            read_exact(input, &mut key, "key")?;
            let key = String::from_utf8(key).map_err(|_| Error::format("container", "key is not utf-8"))?;
            entries.push((key, read_tensor(input)?));
        }
        Ok(TensorContainer { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(file))
    }
}
