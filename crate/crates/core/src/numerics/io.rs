//! Flat binary tensor format: `u64` rank, `rank` × `u64` extents, then the
//! values as `f64`. Everything little-endian.

use std::io::{Read, Write};

use super::{NumericsError, Tensor};

// Guards against absurd headers in corrupted files.
const MAX_RANK: u64 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), NumericsError> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, NumericsError> {
    let rank = read_u64(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(NumericsError::Format(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| NumericsError::Format(format!("extents {shape:?} overflow")))?;
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}
