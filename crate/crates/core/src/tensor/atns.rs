//! ATNS binary tensor format.
//!
//! Layout: magic `ATNS`, `u8` version (1), `u8` dtype (0 = f64, 1 = f32),
//! `u8` ndim, one zero padding byte, `ndim` little-endian `u64` extents, then
//! the row-major little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

use super::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"ATNS";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.ndim() as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn write<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("ATNS {what}")),
        _ => Error::Io(e),
    })
}

/// Read one tensor, converting the stored element type to `T` if needed.
pub fn read<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 8];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad ATNS magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::VersionMismatch { found: head[4] as u32, expected: VERSION as u32 });
    }
    let dtype = DType::from_byte(head[5]).ok_or_else(|| Error::Format(format!("unknown ATNS dtype {}", head[5])))?;
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "extents")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("invalid ATNS shape {shape:?}")));
    }
    let n = numel(&shape);
    let mut payload = vec![0u8; n * dtype.size()];
    read_exact(r, &mut payload, "payload")?;
    let data: Vec<T> = match dtype {
        DType::F64 => payload.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect(),
        DType::F32 => payload.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect(),
    };
    Tensor::new(shape, data)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = bytes;
    read(&mut cur)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
