//! Binary tensor encoding shared by checkpoints and dataset files.
//!
//! Layout (little-endian): `u32 rank`, `rank × u32 extent`, then
//! `product(extents) × f32` in row-major order. Values are always stored as
//! 32-bit floats; `f64` tensors are rounded on write.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Sanity cap on element count to reject corrupt headers before allocating.
const MAX_ELEMENTS: usize = 1 << 30;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, tensor: &Tensor<T>) -> Result<()> {
    let rank = u32::try_from(tensor.rank())
        .map_err(|_| Error::Format("tensor rank exceeds u32".into()))?;
    out.write_all(&rank.to_le_bytes())?;
    for &extent in tensor.shape() {
        let e = u32::try_from(extent)
            .map_err(|_| Error::Format(format!("extent {extent} exceeds u32")))?;
        out.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for &v in tensor.data() {
        let f = v.to_f32().unwrap_or(f32::NAN);
        buf.extend_from_slice(&f.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Real, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let rank = read_u32(input)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let e = read_u32(input)? as usize;
        numel = numel
            .checked_mul(e)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format("tensor too large".into()))?;
        shape.push(e);
    }
    let mut raw = vec![0u8; numel * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Real>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?);
    write_tensor(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?);
    read_tensor(&mut r)
}
