//! Parameter checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TGNW" | version: u8 | count: u32
//! count × { name_len: u32 | name: utf-8 | ndim: u32 | dims: ndim × u32 | values: f32 × prod(dims) }
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGNW";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
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

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version[0])));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}
