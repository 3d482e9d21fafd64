//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u32 format version
//! u64 parameter count
//! per parameter:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   product(extents) × f64 payload
//! ```

use std::io::{Read, Write};

use crate::error::{KernelError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint into a fresh store (gradients zeroed).
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(KernelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| KernelError::Checkpoint(format!("parameter name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

/// Overwrites `target`'s values from a checkpoint, requiring identical
/// parameter names and shapes in the same order.
pub fn load_into<R: Read>(target: &mut ParamStore, r: R) -> Result<()> {
    let loaded = read_checkpoint(r)?;
    if loaded.len() != target.len() {
        return Err(KernelError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            target.len()
        )));
    }
    for ((_, src), dst) in loaded.iter().zip(target.iter_mut()) {
        if src.name != dst.name || src.value.shape() != dst.value.shape() {
            return Err(KernelError::Checkpoint(format!(
                "parameter mismatch: {} {:?} vs {} {:?}",
                src.name,
                src.value.shape(),
                dst.name,
                dst.value.shape()
            )));
        }
        dst.value = src.value.clone();
        dst.grad.data_mut().fill(0.0);
    }
    Ok(())
}
