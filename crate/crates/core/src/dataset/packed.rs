//! TGPC packed point-cloud batches.
//!
//! ```text
//! "TGPC" | count: u32 | points: u32 | dims: u32
//! count × { points × dims × f32 (point-major) | label: u16 }
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PointCloudSample;
use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 4] = b"TGPC";

pub fn write_packed<W: Write>(mut w: W, samples: &[PointCloudSample]) -> Result<()> {
    let n = samples.first().map_or(0, |s| s.points.len());
    if let Some(s) = samples.iter().find(|s| s.points.len() != n) {
        return Err(Error::contract(format!(
            "packed batches need equal point counts: {} has {}, expected {n}",
            s.source_path,
            s.points.len()
        )));
    }
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&3u32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(n * 12 + 2);
    for s in samples {
        let label = u16::try_from(s.label)
            .map_err(|_| Error::contract(format!("label {} does not fit in u16", s.label)))?;
        buf.clear();
        for p in &s.points {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&label.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_packed<R: Read>(mut r: R, source: &str) -> Result<Vec<PointCloudSample>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..4] != PACKED_MAGIC {
        return Err(Error::Format(format!("{source}: not a TGPC file")));
    }
    let word = |i: usize| u32::from_le_bytes([head[i], head[i + 1], head[i + 2], head[i + 3]]) as usize;
    let (count, n, dims) = (word(4), word(8), word(12));
    if dims != 3 {
        return Err(Error::Format(format!("{source}: {dims}-dimensional points are not supported")));
    }
    let mut samples = Vec::with_capacity(count);
    let mut raw = vec![0u8; n * 12 + 2];
    for s in 0..count {
        r.read_exact(&mut raw)?;
        let points = raw[..n * 12]
            .chunks_exact(12)
            .map(|c| {
                [0, 4, 8].map(|o| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]))
            })
            .collect();
        let label = u16::from_le_bytes([raw[n * 12], raw[n * 12 + 1]]) as usize;
        samples.push(PointCloudSample::new(points, label, format!("{source}#{s}"))?);
    }
    Ok(samples)
}

pub fn write_packed_file(path: &Path, samples: &[PointCloudSample]) -> Result<()> {
    let f = fs::File::create(path)?;
    write_packed(BufWriter::new(f), samples)
}

pub fn read_packed_file(path: &Path) -> Result<Vec<PointCloudSample>> {
    let f = fs::File::open(path)?;
    read_packed(BufReader::new(f), &path.display().to_string())
}
