mod manifest;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use treegraph_core::augment::{augment_batch, AugmentConfig};
use treegraph_core::dataset::{load_cloud, normalize_unit_sphere, write_xyz, CloudFormat, DatasetManifest, Split};
use treegraph_core::graph::ScaleTriple;
use treegraph_core::model::{Model, ModelConfig, Pooling, Variant};
use treegraph_core::pipeline::{self, load_prepared, sweep_csv, sweep_k, write_atomic};
use treegraph_core::sampling::SamplingConfig;
use treegraph_core::synth;
use treegraph_core::train::{batch_tensor, evaluate, history_csv, train, TrainConfig};
use treegraph_core::{Error, Result};

use manifest::RunManifest;

const MODEL_FILE: &str = "model.tgnw";

#[derive(Parser)]
#[command(name = "treegraph", version, about = "Multi-scale graph CNN tree point-cloud classifier")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxel-reduce, subsample and normalize the clouds listed in a manifest.
    Preprocess(PreprocessArgs),
    /// Write the synthetic three-class tree set with a manifest.
    Synth(SynthArgs),
    /// Augment one cloud and write the result for inspection.
    AugmentPreview(AugmentArgs),
    /// Train a model on a preprocessed dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a preprocessed dataset.
    Eval(EvalArgs),
    /// Train and evaluate one model per (k1,k2,k3) triple.
    SweepK(SweepArgs),
}

/// Sections of a TOML config file; flags override whatever it sets.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    sampling: SamplingConfig,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    target_points: Option<usize>,
    #[arg(long)]
    voxel_target: Option<usize>,
    #[arg(long)]
    voxel_tolerance: Option<usize>,
    /// FPS start seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplingFlags {
    fn apply(&self, c: &mut SamplingConfig) {
        if let Some(v) = self.target_points {
            c.target_points = v;
        }
        if let Some(v) = self.voxel_target {
            c.voxel_target = v;
        }
        if let Some(v) = self.voxel_tolerance {
            c.voxel_tolerance = v;
        }
        if let Some(v) = self.seed {
            c.seed = Some(v);
        }
    }
}

#[derive(Args)]
struct PreprocessArgs {
    /// CSV with columns path,class,split.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    n_per_class: usize,
    #[arg(long, default_value_t = synth::SYNTH_POINTS)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    train_fraction: f64,
}

#[derive(Args)]
struct AugmentArgs {
    /// An `.xyz` cloud; it is normalized before augmenting.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sigma_j: Option<f64>,
    #[arg(long)]
    no_rotate: bool,
    #[arg(long)]
    no_delete: bool,
    #[arg(long)]
    s_min: Option<f64>,
    #[arg(long)]
    s_max: Option<f64>,
    /// Also render a side view of input and output.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    variant: Option<Variant>,
    /// Neighbor counts `k1,k2,k3` with k1 < k2 < k3.
    #[arg(long)]
    scales: Option<ScaleTriple>,
    #[arg(long)]
    backbone_k: Option<usize>,
    /// Reduce the embedding by max only instead of max and mean.
    #[arg(long)]
    max_pool: bool,
    #[arg(long)]
    dropout: Option<f64>,
}

impl ModelFlags {
    fn apply(&self, c: &mut ModelConfig) {
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(v) = self.scales {
            c.scales = v;
        }
        if let Some(v) = self.backbone_k {
            c.backbone_k = v;
        }
        if self.max_pool {
            c.pooling = Pooling::Max;
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cosine floor; 0 gives the conventional schedule.
    #[arg(long)]
    eta_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_class_weights: bool,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.eta_min {
            c.eta_min = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.no_augment {
            c.augment = None;
        }
        if self.no_class_weights {
            c.class_weighting = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory of `preprocess`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Render loss and accuracy curves to `curves.svg`.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Directory for `metrics.csv`, `confusion.csv` and `run.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Repeatable: `--triple 5,20,30 --triple 5,20,50`.
    #[arg(long = "triple", required = true)]
    triples: Vec<String>,
    /// CSV destination; its directory also receives `run.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?.sampling;
    a.sampling.apply(&mut cfg);
    let run = RunManifest::start("preprocess", cfg.seed.unwrap_or(0), to_json(&cfg));
    let report = pipeline::preprocess(&a.manifest, &a.out, &cfg)?;
    for (path, why) in &report.failures {
        eprintln!("skipped {path}: {why}");
    }
    println!(
        "wrote {} train and {} test samples of {} points ({} classes, {} skipped)",
        report.train,
        report.test,
        cfg.target_points,
        report.class_names.len(),
        report.failures.len()
    );
    run.finish(&a.out)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let run = RunManifest::start(
        "synth",
        a.seed,
        serde_json::json!({ "n_per_class": a.n_per_class, "points": a.points, "train_fraction": a.train_fraction }),
    );
    let samples = synth::generate(a.n_per_class, a.points, a.seed)?;
    let mut items = Vec::with_capacity(samples.len());
    for s in &samples {
        let class = synth::SYNTH_CLASSES[s.label];
        let rel = format!("{class}/{}.xyz", s.source_path);
        let path = a.out.join(&rel);
        fs::create_dir_all(path.parent().expect("class directory"))?;
        write_xyz(&path, &s.points)?;
        items.push((rel, class.to_string()));
    }
    let m = DatasetManifest::stratified(items, a.train_fraction, a.seed)?;
    write_atomic(&a.out.join("manifest.csv"), m.to_csv().as_bytes())?;
    println!("wrote {} clouds in {} classes to {}", samples.len(), m.num_classes(), a.out.display());
    run.finish(&a.out)
}

fn cmd_augment_preview(a: AugmentArgs) -> Result<()> {
    let mut cfg = AugmentConfig { seed: a.seed, ..Default::default() };
    if let Some(v) = a.sigma_j {
        cfg.sigma_j = v;
    }
    if let Some(v) = a.s_min {
        cfg.s_min = v;
    }
    if let Some(v) = a.s_max {
        cfg.s_max = v;
    }
    cfg.rotate = !a.no_rotate;
    cfg.delete = !a.no_delete;
    let cloud = normalize_unit_sphere(&load_cloud(&a.input, CloudFormat::from_path(&a.input))?)?;
    let batch = batch_tensor(&[&cloud])?;
    let out = augment_batch(&batch, &cfg)?;
    let n = cloud.len();
    let d = out.data();
    let points: Vec<[f32; 3]> = (0..n).map(|i| [d[i], d[n + i], d[2 * n + i]]).collect();
    write_xyz(&a.out, &points)?;
    if let Some(p) = &a.svg {
        write_atomic(p, svg::scatter_xz("input (blue) and augmented (red), x against z", &[&cloud.points, &points]).as_bytes())?;
    }
    let zeroed = points.iter().filter(|p| p.iter().all(|v| *v == 0.0)).count();
    println!("wrote {} ({} points, {zeroed} deleted)", a.out.display(), n);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let (mut mcfg, mut tcfg) = (file.model, file.train);
    a.model.apply(&mut mcfg);
    a.train.apply(&mut tcfg);
    let data = load_prepared(&a.data)?;
    mcfg.num_classes = data.class_names.len();
    fs::create_dir_all(&a.out)?;
    let run = RunManifest::start("train", tcfg.seed, serde_json::json!({ "model": to_json(&mcfg), "train": to_json(&tcfg) }));

    let mut model = Model::<f32>::new(mcfg, tcfg.seed)?;
    println!("{}: {} parameters", model.config.variant, model.parameter_count());
    let test = (!data.test.is_empty()).then_some(data.test.as_slice());
    let report = train(&mut model, &data.train, test, &tcfg, |r| {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  test OA {:.2}  BA {:.2}  kappa {:.4}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.test_oa, r.test_ba, r.test_kappa, r.epoch_time_s
        );
    })?;

    write_atomic(&a.out.join("history.csv"), history_csv(&report.history).as_bytes())?;
    let ckpt = a.out.join(MODEL_FILE);
    let tmp = a.out.join(".model.tmp.tgnw");
    model.save(&tmp)?;
    fs::rename(&tmp, &ckpt)?;
    fs::rename(treegraph_core::model::config_path(&tmp), treegraph_core::model::config_path(&ckpt))?;
    if let Some(t) = test {
        let e = evaluate(&mut model, t, tcfg.batch_size)?;
        write_atomic(&a.out.join("confusion.csv"), e.report.confusion.to_csv(&data.class_names).as_bytes())?;
        println!("best epoch {}: {}", report.best_epoch, e.report);
    }
    if a.svg {
        let h = &report.history;
        let chart = svg::line_chart(
            "training curves",
            &[
                ("train loss", h.iter().map(|r| r.train_loss).collect()),
                ("test OA", h.iter().map(|r| r.test_oa).collect()),
            ],
        );
        write_atomic(&a.out.join("curves.svg"), chart.as_bytes())?;
    }
    println!("checkpoint: {}", ckpt.display());
    run.finish(&a.out)
}

fn metrics_csv(r: &treegraph_core::train::MetricsReport, names: &[String]) -> String {
    let mut s = format!("metric,value\noa,{}\nba,{}\nkappa,{}\n", r.oa, r.ba, r.kappa);
    for (c, name) in names.iter().enumerate() {
        s.push_str(&format!("recall_{name},{}\nprecision_{name},{}\n", r.recall[c], r.precision[c]));
    }
    s
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = load_prepared(&a.data)?;
    let mut model = Model::<f32>::load(&a.checkpoint)?;
    if model.config.num_classes != data.class_names.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} classes, dataset has {}",
            model.config.num_classes,
            data.class_names.len()
        )));
    }
    let samples = match a.split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    let run = RunManifest::start(
        "eval",
        0,
        serde_json::json!({ "checkpoint": a.checkpoint, "split": a.split.as_str(), "batch_size": a.batch_size, "model": to_json(&model.config) }),
    );
    let e = evaluate(&mut model, samples, a.batch_size)?;
    println!("{} ({} samples): {}", a.split.as_str(), samples.len(), e.report);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_atomic(&out.join("metrics.csv"), metrics_csv(&e.report, &data.class_names).as_bytes())?;
        write_atomic(&out.join("confusion.csv"), e.report.confusion.to_csv(&data.class_names).as_bytes())?;
        run.finish(out)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let triples = a.triples.iter().map(|t| t.parse::<ScaleTriple>()).collect::<Result<Vec<_>>>()?;
    let file = read_config(a.config.as_deref())?;
    let (mut mcfg, mut tcfg) = (file.model, file.train);
    a.model.apply(&mut mcfg);
    a.train.apply(&mut tcfg);
    let data = load_prepared(&a.data)?;
    mcfg.num_classes = data.class_names.len();
    let run = RunManifest::start(
        "sweep-k",
        tcfg.seed,
        serde_json::json!({ "triples": a.triples, "model": to_json(&mcfg), "train": to_json(&tcfg) }),
    );
    let rows = sweep_k(&triples, &mcfg, &tcfg, &data.train, &data.test, |r| {
        let [x, y, z] = r.scales.as_array();
        println!("({x},{y},{z}): OA {:.2} BA {:.2} kappa {:.4} epoch {:.1}s", r.oa, r.ba, r.kappa, r.epoch_time);
    })?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    write_atomic(&a.out, sweep_csv(&rows).as_bytes())?;
    run.finish(dir)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TG_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("TG_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config("TG_THREADS must be at least 1".into()));
        }
        treegraph_core::par::init_threads(n);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::AugmentPreview(a) => cmd_augment_preview(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::SweepK(a) => cmd_sweep(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
