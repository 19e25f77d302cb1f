//! Synthetic three-class tree set: tapered cylinders ("conifer"), a sphere on
//! a stick ("broadleaf") and a branched cone ("shrub"), plus a
//! nearest-centroid height-histogram baseline to compare against.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{normalize_unit_sphere, PointCloudSample};
use crate::error::{Error, Result};

pub const SYNTH_CLASSES: [&str; 3] = ["conifer", "broadleaf", "shrub"];
pub const SYNTH_POINTS: usize = 1024;
pub const MIN_PER_CLASS: usize = 4;

/// Raw (unnormalized) clouds, `n_per_class` of each class, ordered by class.
pub fn generate(n_per_class: usize, points: usize, seed: u64) -> Result<Vec<PointCloudSample>> {
    if n_per_class < MIN_PER_CLASS {
        return Err(Error::contract(format!("need at least {MIN_PER_CLASS} samples per class, got {n_per_class}")));
    }
    let mut out = Vec::with_capacity(3 * n_per_class);
    for (label, name) in SYNTH_CLASSES.iter().enumerate() {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((label * 1_000_003 + i) as u64);
            let pts = match label {
                0 => conifer(&mut rng, points),
                1 => broadleaf(&mut rng, points),
                _ => shrub(&mut rng, points),
            };
            out.push(PointCloudSample::new(pts, label, format!("{name}_{i:04}"))?);
        }
    }
    Ok(out)
}

/// Unit-sphere normalized train/test split with a fixed count per class.
pub fn train_test_split(
    train_per_class: usize,
    test_per_class: usize,
    points: usize,
    seed: u64,
) -> Result<(Vec<PointCloudSample>, Vec<PointCloudSample>)> {
    let per_class = train_per_class + test_per_class;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in generate(per_class, points, seed)?.into_iter().enumerate() {
        let s = normalize_unit_sphere(&s)?;
        if i % per_class < train_per_class {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

fn jitter(rng: &mut ChaCha8Rng, p: [f64; 3], sigma: f64) -> [f32; 3] {
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    [0, 1, 2].map(|a| (p[a] + n.sample(rng)) as f32)
}

/// Surface of a cylinder whose radius shrinks linearly with height.
fn conifer(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    let h = rng.random_range(4.0..8.0);
    let r0 = rng.random_range(0.8..1.6);
    let taper = rng.random_range(0.2..1.0);
    let r_at = |t: f64| r0 * (1.0 - (1.0 - taper) * t);
    (0..n)
        .map(|_| {
            // Rejection on radius keeps the area density uniform.
            let t = loop {
                let t: f64 = rng.random();
                if rng.random::<f64>() * r0 <= r_at(t) {
                    break t;
                }
            };
            let a = rng.random_range(0.0..TAU);
            let r = r_at(t);
            jitter(rng, [r * a.cos(), r * a.sin(), t * h], 0.03)
        })
        .collect()
}

fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..1.0);
    let a = rng.random_range(0.0..TAU);
    let s = (1.0 - z * z).sqrt();
    [s * a.cos(), s * a.sin(), z]
}

/// A thin trunk topped by a spherical crown.
fn broadleaf(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    let trunk = rng.random_range(0.5..2.5);
    let crown = rng.random_range(1.2..2.6);
    let trunk_r = rng.random_range(0.08..0.2);
    let trunk_share = rng.random_range(0.1..0.4);
    let squash = rng.random_range(0.7..1.2);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < trunk_share {
                let a = rng.random_range(0.0..TAU);
                let z = rng.random_range(0.0..trunk);
                jitter(rng, [trunk_r * a.cos(), trunk_r * a.sin(), z], 0.02)
            } else {
                let s = sphere_point(rng);
                jitter(rng, [crown * s[0], crown * s[1], trunk + crown * squash * (1.0 + s[2])], 0.03)
            }
        })
        .collect()
}

/// Straight branches fanning out of the base inside a cone.
fn shrub(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    let branches = rng.random_range(4..=9);
    let height = rng.random_range(2.0..5.0);
    let dirs: Vec<[f64; 3]> = (0..branches)
        .map(|_| {
            let tilt: f64 = rng.random_range(0.15..0.75);
            let a = rng.random_range(0.0..TAU);
            let len = height * rng.random_range(0.7..1.1) / tilt.cos();
            [len * tilt.sin() * a.cos(), len * tilt.sin() * a.sin(), len * tilt.cos()]
        })
        .collect();
    let radius = rng.random_range(0.05..0.15);
    (0..n)
        .map(|_| {
            let d = dirs[rng.random_range(0..dirs.len())];
            let t: f64 = rng.random();
            let a = rng.random_range(0.0..TAU);
            let p = [d[0] * t + radius * a.cos(), d[1] * t + radius * a.sin(), d[2] * t];
            jitter(rng, p, 0.03)
        })
        .collect()
}

/// Normalized histogram of z over `[min z, max z]`.
pub fn height_histogram(sample: &PointCloudSample, bins: usize) -> Vec<f64> {
    let (lo, hi) = sample
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[2] as f64), hi.max(p[2] as f64)));
    let span = (hi - lo).max(1e-12);
    let mut h = vec![0.0; bins];
    for p in &sample.points {
        let b = (((p[2] as f64 - lo) / span) * bins as f64) as usize;
        h[b.min(bins - 1)] += 1.0;
    }
    let n = sample.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Classifies by the closest per-class mean height histogram.
#[derive(Clone, Debug)]
pub struct NearestCentroid {
    pub bins: usize,
    pub centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    pub fn fit(train: &[PointCloudSample], classes: usize, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("histogram needs at least one bin"));
        }
        let mut sums = vec![vec![0.0; bins]; classes];
        let mut counts = vec![0usize; classes];
        for s in train {
            if s.label >= classes {
                return Err(Error::contract(format!("label {} out of range", s.label)));
            }
            for (acc, v) in sums[s.label].iter_mut().zip(height_histogram(s, bins)) {
                *acc += v;
            }
            counts[s.label] += 1;
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(NearestCentroid { bins, centroids })
    }

    pub fn predict(&self, sample: &PointCloudSample) -> usize {
        let h = height_histogram(sample, self.bins);
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if let Some(m) = centroid {
                let d: f64 = m.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
        }
        best.1
    }

    /// Percentage of `samples` classified correctly.
    pub fn accuracy(&self, samples: &[PointCloudSample]) -> f64 {
        let hits = samples.iter().filter(|s| self.predict(s) == s.label).count();
        100.0 * hits as f64 / samples.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let s = generate(5, 256, 3).unwrap();
        assert_eq!(s.len(), 15);
        assert!(s.iter().all(|c| c.len() == 256));
        assert_eq!(s.iter().filter(|c| c.label == 2).count(), 5);
        assert!(generate(3, 256, 0).is_err());
    }

    #[test]
    fn seeded_and_independent_of_set_size() {
        let a = generate(4, 128, 9).unwrap();
        let b = generate(6, 128, 9).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[4], b[6]);
        assert_ne!(a[0].points, generate(4, 128, 10).unwrap()[0].points);
    }

    #[test]
    fn normalized_centroids_sit_at_origin() {
        for s in generate(4, 512, 1).unwrap() {
            let n = normalize_unit_sphere(&s).unwrap();
            for a in 0..3 {
                let m: f64 = n.points.iter().map(|p| p[a] as f64).sum::<f64>() / 512.0;
                assert!(m.abs() < 1e-5);
            }
        }
    }

    #[test]
    fn histogram_sums_to_one() {
        let s = &generate(4, 300, 2).unwrap()[7];
        let h = height_histogram(s, 10);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
