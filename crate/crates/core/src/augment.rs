//! Train-time augmentation for tree point clouds: height-weighted jitter,
//! rotation about the vertical axis, uniform scaling and occlusion-style
//! point deletion.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEIGHT_EPS: f64 = 1e-8;
const KEEP_PROB: f64 = 0.9;
const MIN_KEEP_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub sigma_j: f64,
    pub rotate: bool,
    pub delete: bool,
    pub s_min: f64,
    pub s_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { sigma_j: 0.01, rotate: true, delete: true, s_min: 0.8, s_max: 1.2, seed: 0 }
    }
}

impl AugmentConfig {
    /// Every gate closed: the output equals the input.
    pub fn identity() -> Self {
        AugmentConfig { sigma_j: 0.0, rotate: false, delete: false, s_min: 1.0, s_max: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_j >= 0.0 && self.sigma_j.is_finite()) {
            return Err(Error::config(format!("sigma_j must be >= 0, got {}", self.sigma_j)));
        }
        if !(self.s_min > 0.0 && self.s_min <= self.s_max && self.s_max.is_finite()) {
            return Err(Error::config(format!("scale bounds need 0 < s_min <= s_max, got [{}, {}]", self.s_min, self.s_max)));
        }
        Ok(())
    }
}

/// Overrides for otherwise random draws, so tests can pin individual steps.
#[derive(Clone, Copy, Debug, Default)]
pub struct AugmentHooks {
    pub theta: Option<f64>,
    pub delete_coin: Option<bool>,
}

/// Augments `batch [B, 3, N]` with an RNG seeded from `cfg.seed`.
pub fn augment_batch(batch: &Tensor<f32>, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_batch_with(batch, cfg, &mut rng, AugmentHooks::default())
}

pub fn augment_batch_with(
    batch: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut dyn RngCore,
    hooks: AugmentHooks,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if batch.ndim() != 3 || batch.dim(1) != 3 {
        return Err(Error::shape(format!("augmentation expects [B, 3, N], got {:?}", batch.shape())));
    }
    let (b, n) = (batch.dim(0), batch.dim(2));
    let mut out = batch.clone();
    for s in 0..b {
        let block = &mut out.data_mut()[s * 3 * n..(s + 1) * 3 * n];
        augment_sample(block, n, cfg, rng, hooks);
    }
    Ok(out)
}

fn augment_sample(p: &mut [f32], n: usize, cfg: &AugmentConfig, rng: &mut dyn RngCore, hooks: AugmentHooks) {
    let (xs, rest) = p.split_at_mut(n);
    let (ys, zs) = rest.split_at_mut(n);

    if cfg.sigma_j > 0.0 {
        let (h_min, h_max) = zs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| {
            (lo.min(z as f64), hi.max(z as f64))
        });
        let normal = Normal::new(0.0, cfg.sigma_j).expect("validated sigma");
        for i in 0..n {
            let h = (zs[i] as f64 - h_min) / (h_max - h_min + HEIGHT_EPS);
            let j: [f64; 3] = [0; 3].map(|_| normal.sample(rng));
            if h != 0.0 {
                xs[i] = (xs[i] as f64 + j[0] * h) as f32;
                ys[i] = (ys[i] as f64 + j[1] * h) as f32;
                zs[i] = (zs[i] as f64 + j[2] * h) as f32;
            }
        }
    }

    if cfg.rotate {
        let drawn = rng.random_range(0.0..std::f64::consts::TAU);
        let theta = hooks.theta.unwrap_or(drawn);
        let (sin, cos) = theta.sin_cos();
        for i in 0..n {
            let (x, y) = (xs[i] as f64, ys[i] as f64);
            xs[i] = (cos * x - sin * y) as f32;
            ys[i] = (sin * x + cos * y) as f32;
        }
    }

    let scale = if cfg.s_min == cfg.s_max { cfg.s_min } else { rng.random_range(cfg.s_min..=cfg.s_max) };
    if scale != 1.0 {
        for v in xs.iter_mut().chain(ys.iter_mut()).chain(zs.iter_mut()) {
            *v = (*v as f64 * scale) as f32;
        }
    }

    if cfg.delete {
        let coin = rng.random_bool(0.5);
        if hooks.delete_coin.unwrap_or(coin) {
            let mut keep: Vec<bool> = (0..n).map(|_| rng.random_bool(KEEP_PROB)).collect();
            let need = (MIN_KEEP_FRACTION * n as f64).ceil() as usize;
            let kept = keep.iter().filter(|&&k| k).count();
            if kept < need {
                let mut dropped: Vec<usize> = (0..n).filter(|&i| !keep[i]).collect();
                dropped.shuffle(rng);
                for &i in &dropped[..need - kept] {
                    keep[i] = true;
                }
            }
            for i in (0..n).filter(|&i| !keep[i]) {
                xs[i] = 0.0;
                ys[i] = 0.0;
                zs[i] = 0.0;
            }
        }
    }
}
