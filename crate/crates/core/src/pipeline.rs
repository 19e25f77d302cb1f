//! Dataset preparation and the k-sweep, shared by the command-line tools.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    load_cloud, normalize_unit_sphere, read_packed_file, write_packed, CloudFormat, DatasetManifest, PointCloudSample,
    Split,
};
use crate::error::{Error, Result};
use crate::graph::ScaleTriple;
use crate::model::{Model, ModelConfig};
use crate::par;
use crate::sampling::{farthest_point_sample, voxel_downsample_recursive, SamplingConfig};
use crate::train::{evaluate, train, TrainConfig};

pub const TRAIN_FILE: &str = "train.tgpc";
pub const TEST_FILE: &str = "test.tgpc";
pub const CLASSES_FILE: &str = "classes.txt";

/// Largest tolerated share of unreadable or degenerate files.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Repeats seeded random points until the cloud has `target` points.
pub fn pad_cloud(sample: &PointCloudSample, target: usize, seed: u64) -> PointCloudSample {
    let mut points = sample.points.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    while points.len() < target {
        points.push(points[rng.random_range(0..n)]);
    }
    PointCloudSample { points, ..sample.clone() }
}

/// Voxel reduction for large clouds, FPS (or padding) to the target size,
/// then unit-sphere normalization.
pub fn prepare_cloud(sample: &PointCloudSample, cfg: &SamplingConfig) -> Result<PointCloudSample> {
    cfg.validate()?;
    let mut cloud = sample.clone();
    if cloud.len() > cfg.voxel_target + cfg.voxel_tolerance {
        cloud.points = voxel_downsample_recursive(&cloud.points, cfg)?.points;
    }
    if cloud.len() >= cfg.target_points {
        let idx = farthest_point_sample(&cloud.points, cfg.target_points, cfg.seed)?;
        cloud.points = idx.iter().map(|&i| cloud.points[i]).collect();
    } else {
        log::warn!("{}: {} points, padding to {}", cloud.source_path, cloud.len(), cfg.target_points);
        cloud = pad_cloud(&cloud, cfg.target_points, cfg.seed.unwrap_or(0));
    }
    normalize_unit_sphere(&cloud)
}

#[derive(Clone, Debug)]
pub struct PreprocessReport {
    pub train: usize,
    pub test: usize,
    /// `(file, diagnostic)` for every skipped entry.
    pub failures: Vec<(String, String)>,
    pub class_names: Vec<String>,
}

/// Prepares every manifest entry and writes `train.tgpc`, `test.tgpc` and
/// `classes.txt` under `out_dir`. Fails when more than a tenth of the files fail.
pub fn preprocess(manifest_path: &Path, out_dir: &Path, cfg: &SamplingConfig) -> Result<PreprocessReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    let entries = &manifest.entries;
    let results = par::map_range(entries.len(), |i| {
        let e = &entries[i];
        let path = DatasetManifest::resolve(manifest_path, e);
        let label = manifest.label_of(&e.class_name).expect("manifest class");
        load_cloud(&path, CloudFormat::from_path(&path))
            .and_then(|s| prepare_cloud(&PointCloudSample { label, source_path: e.path.clone(), ..s }, cfg))
    });

    let (mut train, mut test, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(s) if e.split == Split::Train => train.push(s),
            Ok(s) => test.push(s),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path);
                failures.push((e.path.clone(), err.to_string()));
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * entries.len() as f64 {
        return Err(Error::contract(format!(
            "{} of {} files failed (first: {}: {})",
            failures.len(),
            entries.len(),
            failures[0].0,
            failures[0].1
        )));
    }
    if train.is_empty() {
        return Err(Error::contract("no training sample survived preprocessing"));
    }

    fs::create_dir_all(out_dir)?;
    for (name, samples) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let mut bytes = Vec::new();
        write_packed(&mut bytes, samples)?;
        write_atomic(&out_dir.join(name), &bytes)?;
    }
    let classes: String = manifest.class_names.iter().map(|c| format!("{c}\n")).collect();
    write_atomic(&out_dir.join(CLASSES_FILE), classes.as_bytes())?;
    Ok(PreprocessReport { train: train.len(), test: test.len(), failures, class_names: manifest.class_names })
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub train: Vec<PointCloudSample>,
    pub test: Vec<PointCloudSample>,
    pub class_names: Vec<String>,
}

pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let class_names: Vec<String> =
        fs::read_to_string(dir.join(CLASSES_FILE))?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let test_path = dir.join(TEST_FILE);
    let test = if test_path.exists() { read_packed_file(&test_path)? } else { Vec::new() };
    Ok(PreparedDataset { train: read_packed_file(&dir.join(TRAIN_FILE))?, test, class_names })
}

pub fn prepared_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(TRAIN_FILE), dir.join(TEST_FILE), dir.join(CLASSES_FILE)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scales: ScaleTriple,
    pub oa: f64,
    pub ba: f64,
    pub kappa: f64,
    /// Mean training compute time per epoch, seconds.
    pub epoch_time: f64,
}

pub const SWEEP_HEADER: &str = "k1,k2,k3,oa,ba,kappa,epoch_time";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let [a, b, c] = r.scales.as_array();
        let _ = writeln!(s, "{a},{b},{c},{},{},{},{}", r.oa, r.ba, r.kappa, r.epoch_time);
    }
    s
}

/// Trains one model per triple. Every triple is checked before any training starts.
pub fn sweep_k(
    triples: &[ScaleTriple],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[PointCloudSample],
    test_set: &[PointCloudSample],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if triples.is_empty() {
        return Err(Error::config("sweep needs at least one (k1,k2,k3) triple"));
    }
    let n = train_set.iter().chain(test_set).map(|s| s.len()).min().unwrap_or(0);
    for t in triples {
        t.validate_strict()?;
        t.validate_for(n)?;
        ModelConfig { scales: *t, ..model.clone() }.validate()?;
    }
    let mut rows = Vec::with_capacity(triples.len());
    for t in triples {
        let cfg = ModelConfig { scales: *t, ..model.clone() };
        let mut m = Model::<f32>::new(cfg, train_cfg.seed)?;
        let report = train(&mut m, train_set, None, train_cfg, |_| {})?;
        let r = evaluate(&mut m, test_set, train_cfg.batch_size)?.report;
        let epoch_time = report.history.iter().map(|h| h.epoch_time_s).sum::<f64>() / report.history.len() as f64;
        let row = SweepRow { scales: *t, oa: r.oa, ba: r.ba, kappa: r.kappa, epoch_time };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize) -> PointCloudSample {
        let pts = (0..n).map(|i| [i as f32, (i * i % 7) as f32, (i % 3) as f32]).collect();
        PointCloudSample::new(pts, 0, "t").unwrap()
    }

    #[test]
    fn padding_reuses_existing_points() {
        let s = cloud(10);
        let p = pad_cloud(&s, 25, 4);
        assert_eq!(p.len(), 25);
        assert_eq!(&p.points[..10], &s.points[..]);
        assert!(p.points[10..].iter().all(|q| s.points.contains(q)));
        assert_eq!(p, pad_cloud(&s, 25, 4));
    }

    #[test]
    fn prepared_clouds_have_target_size_and_unit_radius() {
        let cfg = SamplingConfig { target_points: 16, ..Default::default() };
        for n in [8, 16, 200] {
            let p = prepare_cloud(&cloud(n), &cfg).unwrap();
            assert_eq!(p.len(), 16);
            let r = p.points.iter().map(|q| q.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn sweep_csv_layout() {
        let row = SweepRow { scales: ScaleTriple::new(5, 20, 30).unwrap(), oa: 90.0, ba: 85.5, kappa: 0.8, epoch_time: 1.5 };
        assert_eq!(sweep_csv(&[row]), "k1,k2,k3,oa,ba,kappa,epoch_time\n5,20,30,90,85.5,0.8,1.5\n");
    }
}
