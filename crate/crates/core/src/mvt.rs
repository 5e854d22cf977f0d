//! MVT1 tensor files.
//!
//! Layout (little-endian): magic `MVT1`, `u8` dtype code (1 = f32, 2 = f64),
//! `u8` rank, `rank × u64` extents, then the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + T::DTYPE.size() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decode, converting the stored element type to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let corrupt = |msg: &str| Error::Format(format!("corrupt MVT1 tensor: {msg}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| corrupt("unknown dtype"))?;
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(corrupt("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("extent overflow"))?;
    let payload = &bytes[header..];
    if payload.len() != n * dtype.size() {
        return Err(corrupt("payload length does not match shape"));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_to<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

pub fn read_from<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    decode(&buf)
}

pub fn save<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
