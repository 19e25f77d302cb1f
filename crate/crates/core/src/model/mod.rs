//! MS-DGCNN++ and its two baselines, DGCNN and the parallel multi-scale DGCNN.

mod layers;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use layers::{ConvBn, Linear};

use crate::error::{Error, Result};
use crate::graph::{self, BatchNorm, EdgeConv, ScaleTriple, SCALE_CHANNELS};
use crate::real::Real;
use crate::tensor::{read_checkpoint, write_checkpoint, DropoutMode, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MsdgcnnPp,
    MsdgcnnParallel,
    Dgcnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MsdgcnnPp, Variant::MsdgcnnParallel, Variant::Dgcnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MsdgcnnPp => "msdgcnn_pp",
            Variant::MsdgcnnParallel => "msdgcnn_parallel",
            Variant::Dgcnn => "dgcnn",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (expected msdgcnn_pp, msdgcnn_parallel or dgcnn)")))
    }
}

/// How the point-wise embedding is reduced to one vector per cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    /// Max and mean concatenated, doubling the head input width.
    MaxMean,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub scales: ScaleTriple,
    /// Neighbor count of the dynamic backbone layers (every layer for `dgcnn`).
    pub backbone_k: usize,
    pub fusion_width: usize,
    pub embedding_dim: usize,
    pub head_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub pooling: Pooling,
    pub direction_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::MsdgcnnPp,
            scales: ScaleTriple { k_local: 5, k_branch: 20, k_canopy: 50 },
            backbone_k: 20,
            fusion_width: 64,
            embedding_dim: 1024,
            head_dims: vec![512, 256],
            num_classes: 7,
            dropout: 0.5,
            leaky_slope: 0.2,
            pooling: Pooling::MaxMean,
            direction_eps: graph::DIRECTION_EPS,
        }
    }
}

const BACKBONE_WIDTHS: [usize; 3] = [64, 128, 256];
const DGCNN_WIDTHS: [usize; 4] = [64, 64, 128, 256];
const PARALLEL_WIDTHS: [usize; 2] = [64, 64];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.backbone_k == 0 || self.fusion_width == 0 || self.embedding_dim == 0 {
            return Err(Error::config("neighbor count and widths must be positive"));
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(Error::config(format!("bad head dims {:?}", self.head_dims)));
        }
        if !(self.direction_eps > 0.0) {
            return Err(Error::config("direction eps must be positive"));
        }
        if self.variant != Variant::Dgcnn {
            self.scales.validate_for(usize::MAX)?;
        }
        Ok(())
    }

    /// Smallest cloud the model accepts.
    pub fn min_points(&self) -> usize {
        match self.variant {
            Variant::Dgcnn => self.backbone_k,
            Variant::MsdgcnnParallel => self.scales.k_canopy,
            Variant::MsdgcnnPp => self.scales.k_canopy.max(self.backbone_k),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Forward-pass behavior of batch norm and dropout.
pub struct ForwardMode<'a> {
    pub batch_stats: bool,
    pub dropout: DropoutMode<'a>,
}

impl<'a> ForwardMode<'a> {
    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        ForwardMode { batch_stats: true, dropout: DropoutMode::Train(rng) }
    }

    pub fn eval() -> Self {
        ForwardMode { batch_stats: false, dropout: DropoutMode::Eval }
    }

    /// Training plumbing with every dropout unit kept.
    pub fn keep_all(batch_stats: bool) -> Self {
        ForwardMode { batch_stats, dropout: DropoutMode::KeepAll }
    }
}

#[derive(Clone, Debug)]
enum Body<S> {
    Pp { phi: Vec<ConvBn<S>>, psi: ConvBn<S>, edge: Vec<EdgeConv<S>> },
    Parallel { branches: Vec<Vec<EdgeConv<S>>> },
    Dgcnn { edge: Vec<EdgeConv<S>> },
}

#[derive(Clone, Debug)]
struct HiddenLayer<S> {
    fc: Linear,
    bn: BatchNorm<S>,
}

#[derive(Clone, Debug)]
pub struct ModelSummary {
    pub variant: Variant,
    pub parameter_count: usize,
    pub layers: Vec<(String, Vec<usize>)>,
}

impl std::fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, shape) in &self.layers {
            writeln!(f, "{name:<40} {shape:?}")?;
        }
        write!(f, "{} parameters: {}", self.variant, self.parameter_count)
    }
}

#[derive(Clone, Debug)]
pub struct Model<S = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    /// Use the fused aggregation kernels; `false` runs the primitive compositions.
    pub fused: bool,
    body: Body<S>,
    embed: ConvBn<S>,
    hidden: Vec<HiddenLayer<S>>,
    out: Linear,
}

impl<S: Real> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng: &mut dyn RngCore = &mut rng;
        let mut store = ParamStore::new();
        let k = config.backbone_k;
        let (body, skip_width) = match config.variant {
            Variant::MsdgcnnPp => {
                let fw = config.fusion_width;
                let phi = SCALE_CHANNELS
                    .iter()
                    .enumerate()
                    .map(|(s, &d)| ConvBn::new(&mut store, &format!("fusion.phi{}", s + 1), d, fw, rng))
                    .collect::<Result<Vec<_>>>()?;
                let psi = ConvBn::new(&mut store, "fusion.psi", 3 * fw, fw, rng)?;
                let mut edge = Vec::new();
                let mut cin = fw;
                for (i, &w) in BACKBONE_WIDTHS.iter().enumerate() {
                    edge.push(EdgeConv::new(&mut store, &format!("backbone.edge{}", i + 1), cin, w, k, rng)?);
                    cin = w;
                }
                (Body::Pp { phi, psi, edge }, fw + BACKBONE_WIDTHS.iter().sum::<usize>())
            }
            Variant::Dgcnn => {
                let mut edge = Vec::new();
                let mut cin = 3;
                for (i, &w) in DGCNN_WIDTHS.iter().enumerate() {
                    edge.push(EdgeConv::new(&mut store, &format!("backbone.edge{}", i + 1), cin, w, k, rng)?);
                    cin = w;
                }
                (Body::Dgcnn { edge }, DGCNN_WIDTHS.iter().sum())
            }
            Variant::MsdgcnnParallel => {
                let mut branches = Vec::new();
                for (s, ks) in config.scales.as_array().into_iter().enumerate() {
                    let mut layers = Vec::new();
                    let mut cin = 3;
                    for (i, &w) in PARALLEL_WIDTHS.iter().enumerate() {
                        let name = format!("branch{}.edge{}", s + 1, i + 1);
                        layers.push(EdgeConv::new(&mut store, &name, cin, w, ks, rng)?);
                        cin = w;
                    }
                    branches.push(layers);
                }
                (Body::Parallel { branches }, 3 * PARALLEL_WIDTHS.iter().sum::<usize>())
            }
        };
        let embed = ConvBn::new(&mut store, "embed", skip_width, config.embedding_dim, rng)?;
        let pooled = match config.pooling {
            Pooling::Max => config.embedding_dim,
            Pooling::MaxMean => 2 * config.embedding_dim,
        };
        let mut hidden = Vec::new();
        let mut fan_in = pooled;
        for (i, &w) in config.head_dims.iter().enumerate() {
            let name = format!("head.fc{}", i + 1);
            // the first layer feeds straight into batch norm, so a bias would be redundant
            let fc = Linear::new(&mut store, &name, fan_in, w, i > 0, rng)?;
            let bn = BatchNorm::new(&mut store, &format!("{name}.bn"), w)?;
            hidden.push(HiddenLayer { fc, bn });
            fan_in = w;
        }
        let out_name = format!("head.fc{}", config.head_dims.len() + 1);
        let out = Linear::new(&mut store, &out_name, fan_in, config.num_classes, true, rng)?;
        Ok(Model { config, params: store, fused: true, body, embed, hidden, out })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            variant: self.config.variant,
            parameter_count: self.parameter_count(),
            layers: self.params.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect(),
        }
    }

    fn slope(&self) -> S {
        S::lit(self.config.leaky_slope)
    }

    fn check_points(&self, tape: &Tape<S>, points: Var) -> Result<()> {
        let s = tape.shape(points);
        if s.len() != 3 || s[1] != 3 {
            return Err(Error::shape(format!("model expects points [B, 3, N], got {s:?}")));
        }
        if s[2] < self.config.min_points() {
            return Err(Error::contract(format!(
                "{} points is fewer than the {} the configuration needs",
                s[2],
                self.config.min_points()
            )));
        }
        Ok(())
    }

    /// Multi-scale fusion stage: `[B, 3, N]` → `[B, fusion_width, N]`.
    pub fn fusion_forward(&mut self, tape: &mut Tape<S>, params: &[Var], points: Var, batch_stats: bool) -> Result<Var> {
        let m = self.fusion_concat(tape, params, points, batch_stats)?;
        let slope = self.slope();
        let Body::Pp { psi, .. } = &mut self.body else { unreachable!() };
        psi.forward(tape, params, m, batch_stats, Some(slope))
    }

    /// The three pooled scale encodings stacked, `[B, 3·fusion_width, N]`.
    pub fn fusion_concat(&mut self, tape: &mut Tape<S>, params: &[Var], points: Var, batch_stats: bool) -> Result<Var> {
        let s = tape.shape(points).to_vec();
        if s.len() != 3 || s[1] != 3 {
            return Err(Error::shape(format!("fusion expects points [B, 3, N], got {s:?}")));
        }
        let (slope, fused, scales, eps) = (self.slope(), self.fused, self.config.scales, self.config.direction_eps);
        let Body::Pp { phi, .. } = &mut self.body else {
            return Err(Error::config(format!("{} has no fusion stage", self.config.variant)));
        };
        if s[2] < scales.k_canopy {
            return Err(Error::contract(format!("{} points is fewer than k_canopy = {}", s[2], scales.k_canopy)));
        }
        let idx = graph::knn_multiscale(tape.value(points), scales)?;
        let feats = graph::scale_features(tape, points, &idx, eps)?;
        let mut pooled = Vec::with_capacity(3);
        for (layer, f) in phi.iter_mut().zip(feats) {
            pooled.push(layer.forward_max(tape, params, f, batch_stats, slope, fused)?);
        }
        tape.concat(&pooled, 1)
    }

    /// Logits `[B, num_classes]` for `points [B, 3, N]`.
    pub fn forward(&mut self, tape: &mut Tape<S>, params: &[Var], points: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        self.check_points(tape, points)?;
        let (slope, fused, bs) = (self.slope(), self.fused, mode.batch_stats);
        let edge_fwd = |layer: &mut EdgeConv<S>, tape: &mut Tape<S>, x: Var| {
            if fused {
                layer.forward(tape, params, x, bs, slope)
            } else {
                layer.forward_reference(tape, params, x, bs, slope)
            }
        };
        let skips = match self.config.variant {
            Variant::MsdgcnnPp => {
                let z = self.fusion_forward(tape, params, points, bs)?;
                let Body::Pp { edge, .. } = &mut self.body else { unreachable!() };
                let mut skips = vec![z];
                for layer in edge.iter_mut() {
                    let x = edge_fwd(layer, tape, *skips.last().expect("non-empty"))?;
                    skips.push(x);
                }
                skips
            }
            Variant::Dgcnn => {
                let Body::Dgcnn { edge } = &mut self.body else { unreachable!() };
                let mut skips = Vec::new();
                let mut x = points;
                for layer in edge.iter_mut() {
                    x = edge_fwd(layer, tape, x)?;
                    skips.push(x);
                }
                skips
            }
            Variant::MsdgcnnParallel => {
                let Body::Parallel { branches } = &mut self.body else { unreachable!() };
                let mut skips = Vec::new();
                for branch in branches.iter_mut() {
                    let mut x = points;
                    for layer in branch.iter_mut() {
                        x = edge_fwd(layer, tape, x)?;
                        skips.push(x);
                    }
                }
                skips
            }
        };
        let cat = tape.concat(&skips, 1)?;
        let emb = self.embed.forward(tape, params, cat, bs, Some(slope))?;
        let mut h = tape.max_over_axis(emb, 2)?;
        if self.config.pooling == Pooling::MaxMean {
            let mean = tape.mean_over_axis(emb, 2)?;
            h = tape.concat(&[h, mean], 1)?;
        }
        for layer in &mut self.hidden {
            h = layer.fc.forward(tape, params, h)?;
            h = layer.bn.forward(tape, params, h, bs)?;
            h = tape.leaky_relu(h, slope)?;
            h = tape.dropout(h, self.config.dropout, &mut mode.dropout)?;
        }
        self.out.forward(tape, params, h)
    }

    /// Eval-mode logits on a throwaway tape.
    pub fn predict(&mut self, points: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let p = tape.constant(points.clone());
        let y = self.forward(&mut tape, &params, p, &mut ForwardMode::eval())?;
        Ok(tape.value(y).clone())
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        let mut out: Vec<&mut BatchNorm<S>> = Vec::new();
        match &mut self.body {
            Body::Pp { phi, psi, edge } => {
                out.extend(phi.iter_mut().map(|l| &mut l.bn));
                out.push(&mut psi.bn);
                out.extend(edge.iter_mut().map(|l| &mut l.bn));
            }
            Body::Dgcnn { edge } => out.extend(edge.iter_mut().map(|l| &mut l.bn)),
            Body::Parallel { branches } => {
                out.extend(branches.iter_mut().flat_map(|b| b.iter_mut().map(|l| &mut l.bn)));
            }
        }
        out.push(&mut self.embed.bn);
        out.extend(self.hidden.iter_mut().map(|h| &mut h.bn));
        out
    }

    /// Parameters followed by batch-norm running statistics, in 32-bit.
    pub fn state_dict(&mut self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|p| (p.name.clone(), p.tensor.cast())).collect();
        for bn in self.batch_norms_mut() {
            let c = bn.state.channels();
            let cast = |v: &[S]| Tensor::new(vec![c], v.iter().map(|x| x.f64() as f32).collect()).expect("length c");
            out.push((format!("{}.running_mean", bn.name), cast(&bn.state.running_mean)));
            out.push((format!("{}.running_var", bn.name), cast(&bn.state.running_var)));
        }
        out
    }

    pub fn load_state_dict(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let expected = self.params.len() + 2 * self.batch_norms_mut().len();
        if entries.len() != expected {
            return Err(Error::Format(format!("checkpoint has {} tensors, model expects {expected}", entries.len())));
        }
        let lookup = |name: &str, len: usize| -> Result<Vec<S>> {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if t.len() != len {
                return Err(Error::Format(format!("`{name}` has {} values, expected {len}", t.len())));
            }
            Ok(t.data().iter().map(|&v| S::lit(v as f64)).collect())
        };
        for p in self.params.iter_mut() {
            let data = lookup(&p.name, p.tensor.len())?;
            let (_, t) = entries.iter().find(|(n, _)| n == &p.name).expect("looked up");
            if t.shape() != p.tensor.shape() {
                return Err(Error::Format(format!("`{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape())));
            }
            p.tensor.data_mut().copy_from_slice(&data);
        }
        let mut states = Vec::new();
        for bn in self.batch_norms_mut() {
            let c = bn.state.channels();
            states.push((lookup(&format!("{}.running_mean", bn.name), c)?, lookup(&format!("{}.running_var", bn.name), c)?));
        }
        for (bn, (m, v)) in self.batch_norms_mut().into_iter().zip(states) {
            bn.state.running_mean = m;
            bn.state.running_var = v;
        }
        Ok(())
    }

    /// Writes weights to `path` and the configuration next to it (`.toml`).
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        write_checkpoint(BufWriter::new(f), &self.state_dict())?;
        self.config.write(&config_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config = ModelConfig::read(&config_path(path))?;
        let mut model = Model::new(config, 0)?;
        let entries = read_checkpoint(BufReader::new(fs::File::open(path)?))?;
        model.load_state_dict(&entries)?;
        Ok(model)
    }

    /// Same weights and statistics in another scalar type.
    pub fn cast<T: Real>(&mut self) -> Result<Model<T>> {
        let mut other = Model::<T>::new(self.config.clone(), 0)?;
        other.fused = self.fused;
        for (dst, src) in other.params.iter_mut().zip(self.params.iter()) {
            dst.tensor = src.tensor.cast();
        }
        let states: Vec<_> = self.batch_norms_mut().into_iter().map(|b| b.state.clone()).collect();
        for (dst, src) in other.batch_norms_mut().into_iter().zip(states) {
            dst.state.running_mean = src.running_mean.iter().map(|v| T::lit(v.f64())).collect();
            dst.state.running_var = src.running_var.iter().map(|v| T::lit(v.f64())).collect();
        }
        Ok(other)
    }
}

/// The configuration file that accompanies a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

pub fn build_variant<S: Real>(config: ModelConfig, seed: u64) -> Result<Model<S>> {
    Model::new(config, seed)
}

#[cfg(test)]
mod tests;
