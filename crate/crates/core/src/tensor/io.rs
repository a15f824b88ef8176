//! Binary tensor encoding: `u32` rank, `rank × u64` extents, then the raw
//! `f64` payload, all little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

/// Refuses absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| truncated(0, e))?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::parse(0, format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    let mut b8 = [0u8; 8];
    for i in 0..rank {
        r.read_exact(&mut b8)
            .map_err(|e| truncated(4 + 8 * i as u64, e))?;
        let e = u64::from_le_bytes(b8);
        numel = numel.saturating_mul(e);
        shape.push(e as usize);
    }
    if numel > MAX_ELEMENTS {
        return Err(Error::parse(
            4,
            format!("tensor with {numel} elements refused"),
        ));
    }
    let header = 4 + 8 * rank as u64;
    let mut data = Vec::with_capacity(numel as usize);
    for i in 0..numel {
        r.read_exact(&mut b8)
            .map_err(|e| truncated(header + 8 * i, e))?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

fn truncated(offset: u64, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::parse(offset, "truncated tensor")
    } else {
        Error::Io(e)
    }
}
