use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::MIN_POINTS;

/// One object: an `N × 3` point matrix and its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSample {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
    pub source_path: String,
}

impl PointCloudSample {
    pub fn new(points: Vec<[f32; 3]>, label: usize, source_path: impl Into<String>) -> Result<Self> {
        let source_path = source_path.into();
        if points.len() < MIN_POINTS {
            return Err(Error::DegenerateCloud(format!(
                "{source_path}: {} points, at least {MIN_POINTS} required",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::DegenerateCloud(format!("{source_path}: point {i} is not finite")));
        }
        Ok(PointCloudSample { points, label, source_path })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z` triple per line; `#` starts a comment.
    XyzAscii,
    /// A single-sample TGPC file.
    PackedBinary,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tgpc") => CloudFormat::PackedBinary,
            _ => CloudFormat::XyzAscii,
        }
    }
}

/// Loads a cloud in file order. No normalization is applied.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloudSample> {
    match format {
        CloudFormat::XyzAscii => {
            let text = fs::read_to_string(path)?;
            let points = parse_xyz(&text, path)?;
            PointCloudSample::new(points, 0, path.display().to_string())
        }
        CloudFormat::PackedBinary => {
            let mut samples = super::read_packed_file(path)?;
            if samples.len() != 1 {
                return Err(Error::Format(format!(
                    "{}: expected one packed sample, found {}",
                    path.display(),
                    samples.len()
                )));
            }
            Ok(samples.remove(0))
        }
    }
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<[f32; 3]>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: lineno + 1, msg };
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0f32; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            let v: f32 = field.parse().map_err(|_| err(format!("invalid number `{field}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite coordinate `{field}`")));
            }
            *slot = v;
        }
        points.push(p);
    }
    Ok(points)
}

/// Writes `x y z` lines using shortest round-trip formatting, so reading the
/// file back reproduces every value bit-exactly.
pub fn write_xyz(path: &Path, points: &[[f32; 3]]) -> Result<()> {
    let mut text = String::with_capacity(points.len() * 32);
    for p in points {
        let _ = writeln!(text, "{} {} {}", p[0], p[1], p[2]);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Centers a cloud on its centroid and scales the farthest point to unit norm.
pub fn normalize_unit_sphere(cloud: &PointCloudSample) -> Result<PointCloudSample> {
    let n = cloud.points.len() as f64;
    let mut c = [0f64; 3];
    for p in &cloud.points {
        for a in 0..3 {
            c[a] += p[a] as f64;
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let radius = cloud
        .points
        .iter()
        .map(|p| (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if radius < 1e-12 {
        return Err(Error::DegenerateCloud(format!(
            "{}: all points coincide (max deviation {radius:e})",
            cloud.source_path
        )));
    }
    let points = cloud
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|a| ((p[a] as f64 - c[a]) / radius) as f32))
        .collect();
    Ok(PointCloudSample { points, label: cloud.label, source_path: cloud.source_path.clone() })
}
