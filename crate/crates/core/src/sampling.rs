//! Density standardization: pairwise distances, farthest point sampling and
//! iterative voxel downsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub target_points: usize,
    pub voxel_target: usize,
    pub voxel_tolerance: usize,
    /// FPS start index is drawn from this seed; `None` starts at point 0.
    pub seed: Option<u64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { target_points: 1024, voxel_target: 30_000, voxel_tolerance: 500, seed: Some(0) }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_points < crate::dataset::MIN_POINTS {
            return Err(Error::config(format!("target_points {} below {}", self.target_points, crate::dataset::MIN_POINTS)));
        }
        if self.voxel_tolerance >= self.voxel_target {
            return Err(Error::config(format!(
                "voxel tolerance {} must be below voxel target {}",
                self.voxel_tolerance, self.voxel_target
            )));
        }
        Ok(())
    }
}

#[inline]
fn sq_dist<S: Real>(a: &[S; 3], b: &[S; 3]) -> S {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Row-major `N×N` matrix of `−‖x_i − x_j‖²`.
pub fn pairwise_neg_sq_dist<S: Real>(points: &[[S; 3]]) -> Vec<S> {
    let n = points.len();
    let mut out = vec![S::zero(); n * n];
    par::for_each_chunk(&mut out, n.max(1), |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { S::zero() } else { -sq_dist(&points[i], &points[j]) };
        }
    });
    out
}

/// Start index for FPS: seeded-uniform, or 0 without a seed.
pub fn fps_start(n: usize, seed: Option<u64>) -> usize {
    match seed {
        Some(s) if n > 0 => ChaCha8Rng::seed_from_u64(s).random_range(0..n),
        _ => 0,
    }
}

const FPS_CHUNK: usize = 4096;

/// Greedy farthest point sampling with an incremental min-distance cache.
/// Ties go to the lowest index.
pub fn farthest_point_sample(points: &[[f32; 3]], m: usize, seed: Option<u64>) -> Result<Vec<usize>> {
    farthest_point_sample_from(points, m, fps_start(points.len(), seed))
}

pub fn farthest_point_sample_from(points: &[[f32; 3]], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::contract(format!("cannot sample {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::contract(format!("start index {start} out of range for {n} points")));
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
    let mut min_d = vec![f64::INFINITY; n];
    let n_chunks = n.div_ceil(FPS_CHUNK);
    let mut best = vec![(f64::NEG_INFINITY, 0usize); n_chunks];
    let mut selected = Vec::with_capacity(m);
    let mut cur = start;
    for _ in 0..m {
        selected.push(cur);
        min_d[cur] = f64::NEG_INFINITY;
        let c = pts[cur];
        par::for_each_chunk2(&mut min_d, FPS_CHUNK, &mut best, 1, |ci, chunk, b| {
            let base = ci * FPS_CHUNK;
            let mut arg = (f64::NEG_INFINITY, base);
            for (o, d) in chunk.iter_mut().enumerate() {
                if *d != f64::NEG_INFINITY {
                    let nd = sq_dist(&pts[base + o], &c);
                    if nd < *d {
                        *d = nd;
                    }
                }
                if *d > arg.0 {
                    arg = (*d, base + o);
                }
            }
            b[0] = arg;
        });
        // chunks are in index order, so strict `>` keeps the lowest index on ties
        let mut arg = best[0];
        for &b in &best[1..] {
            if b.0 > arg.0 {
                arg = b;
            }
        }
        cur = arg.1;
    }
    Ok(selected)
}

#[derive(Clone, Debug)]
pub struct VoxelResult {
    pub points: Vec<[f32; 3]>,
    pub edge_length: f64,
    pub iterations: usize,
    /// `false` when the search ended outside the tolerance band.
    pub converged: bool,
}

fn voxel_keys(points: &[[f64; 3]], origin: [f64; 3], edge: f64) -> Vec<(u64, u32)> {
    let mut keys: Vec<(u64, u32)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = [0, 1, 2].map(|a| (((p[a] - origin[a]) / edge).floor() as u64).min((1 << 21) - 1));
            ((q[0] << 42) | (q[1] << 21) | q[2], i as u32)
        })
        .collect();
    keys.sort_unstable();
    keys
}

fn voxel_count(points: &[[f64; 3]], origin: [f64; 3], edge: f64) -> usize {
    let keys = voxel_keys(points, origin, edge);
    let mut count = 0;
    let mut last = None;
    for (k, _) in keys {
        if last != Some(k) {
            count += 1;
            last = Some(k);
        }
    }
    count
}

fn voxel_centroids(points: &[[f64; 3]], origin: [f64; 3], edge: f64) -> Vec<[f32; 3]> {
    let keys = voxel_keys(points, origin, edge);
    let mut out = Vec::new();
    let mut i = 0;
    while i < keys.len() {
        let mut j = i;
        let mut acc = [0.0f64; 3];
        while j < keys.len() && keys[j].0 == keys[i].0 {
            let p = points[keys[j].1 as usize];
            for a in 0..3 {
                acc[a] += p[a];
            }
            j += 1;
        }
        let cnt = (j - i) as f64;
        out.push(acc.map(|v| (v / cnt) as f32));
        i = j;
    }
    out
}

/// Reduces a dense cloud to roughly `voxel_target` voxel centroids by bisecting
/// the voxel edge length (geometric midpoints) between `diag/1024` and `diag`.
/// Clouds already within `voxel_target + voxel_tolerance` pass through unchanged.
pub fn voxel_downsample_recursive(points: &[[f32; 3]], cfg: &SamplingConfig) -> Result<VoxelResult> {
    cfg.validate()?;
    if points.len() <= cfg.voxel_target + cfg.voxel_tolerance {
        return Ok(VoxelResult { points: points.to_vec(), edge_length: 0.0, iterations: 0, converged: true });
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
    let mut lo_c = [f64::INFINITY; 3];
    let mut hi_c = [f64::NEG_INFINITY; 3];
    for p in &pts {
        for a in 0..3 {
            lo_c[a] = lo_c[a].min(p[a]);
            hi_c[a] = hi_c[a].max(p[a]);
        }
    }
    let diag = (0..3).map(|a| (hi_c[a] - lo_c[a]).powi(2)).sum::<f64>().sqrt();
    if !(diag > 0.0) {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }
    let target = cfg.voxel_target as i64;
    let tol = cfg.voxel_tolerance as i64;
    // small edge -> many voxels; count decreases as the edge grows
    let (mut lo, mut hi) = (diag / 1024.0, diag);
    let mut best = (i64::MAX, lo);
    let mut iterations = 0;
    for it in 0..64 {
        iterations = it + 1;
        let mid = (lo * hi).sqrt();
        let m = voxel_count(&pts, lo_c, mid) as i64;
        if (m - target).abs() < best.0 {
            best = ((m - target).abs(), mid);
        }
        if (m - target).abs() <= tol {
            break;
        }
        if m > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let converged = best.0 <= tol;
    if !converged {
        log::warn!(
            "voxel search stopped {} points from target {} after {iterations} iterations",
            best.0,
            cfg.voxel_target
        );
    }
    Ok(VoxelResult { points: voxel_centroids(&pts, lo_c, best.1), edge_length: best.1, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_neg(points: &[[f64; 3]]) -> Vec<f64> {
        let mut out = Vec::new();
        for a in points {
            for b in points {
                let d: f64 = (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum();
                out.push(if std::ptr::eq(a, b) { 0.0 } else { -d });
            }
        }
        out
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_neg_sq_dist(&[[0.0f64, 0.0, 0.0], [3.0, 4.0, 0.0]]), vec![0.0, -25.0, -25.0, 0.0]);
        assert_eq!(pairwise_neg_sq_dist(&[[1.0f32, 2.0, 3.0]]), vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..32).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let d = pairwise_neg_sq_dist(&pts);
        assert_eq!(d, naive_neg(&pts));
        let p32: Vec<[f32; 3]> = pts.iter().map(|p| p.map(|v| v as f32)).collect();
        for (a, b) in pairwise_neg_sq_dist(&p32).iter().zip(&d) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn fps_collinear_trace() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 3, None).unwrap(), vec![0, 3, 2]);
        let mut all = farthest_point_sample(&pts, 4, Some(9)).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pts, 5, None).is_err());
    }

    #[test]
    fn fps_prefix_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f32; 3]> = (0..200).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let long = farthest_point_sample(&pts, 40, Some(3)).unwrap();
        for m in [1, 7, 39] {
            assert_eq!(farthest_point_sample(&pts, m, Some(3)).unwrap(), long[..m]);
        }
    }

    fn grid(side: usize, step: f32) -> Vec<[f32; 3]> {
        let mut pts = Vec::with_capacity(side * side * side);
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    pts.push([x as f32 * step, y as f32 * step, z as f32 * step]);
                }
            }
        }
        pts
    }

    #[test]
    fn voxel_grid_hits_target_and_is_scale_equivariant() {
        let cfg = SamplingConfig::default();
        let pts = grid(50, 1.0);
        let r = voxel_downsample_recursive(&pts, &cfg).unwrap();
        assert!(r.converged);
        assert!((29_500..=30_500).contains(&r.points.len()), "{}", r.points.len());
        let r2 = voxel_downsample_recursive(&grid(50, 2.0), &cfg).unwrap();
        assert_eq!(r.points.len(), r2.points.len());
    }

    #[test]
    fn voxel_passthrough_and_centroids_inside_voxel() {
        let cfg = SamplingConfig { voxel_target: 100, voxel_tolerance: 10, ..Default::default() };
        let small = grid(4, 1.0);
        assert_eq!(voxel_downsample_recursive(&small, &cfg).unwrap().points, small);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f32; 3]> = (0..3000).map(|_| [0; 3].map(|_| rng.random_range(0.0..1.0))).collect();
        let r = voxel_downsample_recursive(&pts, &cfg).unwrap();
        assert!(r.converged);
        let min = [0, 1, 2].map(|a| pts.iter().map(|p| p[a] as f64).fold(f64::INFINITY, f64::min));
        for c in &r.points {
            let cell = [0, 1, 2].map(|a| ((c[a] as f64 - min[a]) / r.edge_length).floor());
            let members: Vec<_> = pts
                .iter()
                .filter(|p| [0, 1, 2].map(|a| ((p[a] as f64 - min[a]) / r.edge_length).floor()) == cell)
                .collect();
            assert!(!members.is_empty());
            for a in 0..3 {
                let lo = members.iter().map(|p| p[a]).fold(f32::INFINITY, f32::min);
                let hi = members.iter().map(|p| p[a]).fold(f32::NEG_INFINITY, f32::max);
                assert!(c[a] >= lo - 1e-6 && c[a] <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplingConfig { target_points: 3, ..Default::default() }.validate().is_err());
        assert!(SamplingConfig { voxel_tolerance: 30_000, ..Default::default() }.validate().is_err());
    }
}
