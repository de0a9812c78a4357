//! `TNSR` binary tensor files.
//!
//! Layout: magic `TNSR`, version byte `0x01`, dtype byte (`0x01` f32,
//! `0x02` f64), rank byte, `rank` little-endian `u32` extents, then the raw
//! little-endian scalars in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 0x01;

/// A tensor whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Convert to the requested element type (exact when it already matches).
    pub fn into_typed<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_body<T: Scalar>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Decode one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let header = bytes
        .get(..7)
        .ok_or_else(|| Error::Format("truncated TNSR header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad TNSR magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported TNSR version {:#04x}", header[4])));
    }
    let dtype = DType::from_code(header[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype byte {:#04x}", header[5])))?;
    let rank = header[6] as usize;
    let dims_end = 7 + 4 * rank;
    let dims = bytes
        .get(7..dims_end)
        .ok_or_else(|| Error::Format("truncated TNSR extents".into()))?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let body_end = dims_end + count * dtype.size();
    let body = bytes
        .get(dims_end..body_end)
        .ok_or_else(|| Error::Format(format!("truncated TNSR payload for shape {shape:?}")))?;
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(read_body(shape, body)?),
        DType::F64 => AnyTensor::F64(read_body(shape, body)?),
    };
    Ok((tensor, body_end))
}

pub fn write_tensor<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn read_tensor(mut r: impl Read) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(bytes.as_slice())
}
