use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{ConfusionMatrix, MetricsReport};
use super::optim::{cosine_lr, Adam};
use crate::augment::{augment_batch_with, AugmentConfig, AugmentHooks};
use crate::dataset::{compute_class_weights, ClassWeights, PointCloudSample};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::tensor::{Tape, Tensor};

const ORDER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub eta_min: f64,
    pub seed: u64,
    pub class_weighting: bool,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 300,
            eta_min: 1e-3,
            seed: 0,
            class_weighting: true,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.eta_min >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "need lr > 0, eta_min >= 0 and weight_decay >= 0 (got {}, {}, {})",
                self.lr, self.eta_min, self.weight_decay
            )));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One row of the training history. Test columns are NaN without a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_oa: f64,
    pub test_ba: f64,
    pub test_kappa: f64,
    pub epoch_time_s: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,test_oa,test_ba,test_kappa,epoch_time_s";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.test_oa, r.test_ba, r.test_kappa, r.epoch_time_s
        );
    }
    s
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::Csv(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Csv(format!("bad history field {i} in {row:?}")))
        };
        out.push(EpochRecord {
            epoch: f(0)? as usize,
            lr: f(1)?,
            train_loss: f(2)?,
            test_oa: f(3)?,
            test_ba: f(4)?,
            test_kappa: f(5)?,
            epoch_time_s: f(6)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights the model holds on return.
    pub best_epoch: usize,
    pub best_test_oa: Option<f64>,
    pub class_weights: ClassWeights,
}

/// Stacks equally sized clouds into `[B, 3, N]`.
pub fn batch_tensor(samples: &[&PointCloudSample]) -> Result<Tensor<f32>> {
    let Some(first) = samples.first() else {
        return Err(Error::contract("empty batch"));
    };
    let n = first.len();
    let mut data = vec![0f32; samples.len() * 3 * n];
    for (b, s) in samples.iter().enumerate() {
        if s.len() != n {
            return Err(Error::shape(format!(
                "{} has {} points but the batch expects {n}",
                s.source_path,
                s.len()
            )));
        }
        let block = &mut data[b * 3 * n..(b + 1) * 3 * n];
        for (i, p) in s.points.iter().enumerate() {
            for a in 0..3 {
                block[a * n + i] = p[a];
            }
        }
    }
    Tensor::new(vec![samples.len(), 3, n], data)
}

/// Weights from the train split; classes without samples get weight 0 and a warning.
pub fn train_class_weights(samples: &[PointCloudSample], classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0usize; classes];
    for s in samples {
        if s.label >= classes {
            return Err(Error::contract(format!("{}: label {} out of range for {classes} classes", s.source_path, s.label)));
        }
        counts[s.label] += 1;
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    let w = compute_class_weights(&present)?;
    let mut it = w.weights.into_iter();
    let weights = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 {
                log::warn!("class {c} has no training samples; its loss weight is 0");
                0.0
            } else {
                it.next().expect("one weight per present class")
            }
        })
        .collect();
    Ok(ClassWeights { weights, counts })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<usize>,
}

/// Eval-mode predictions (argmax, lowest index on ties) and metrics.
pub fn evaluate(model: &mut Model<f32>, samples: &[PointCloudSample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let classes = model.config.num_classes;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PointCloudSample> = chunk.iter().collect();
        let logits = model.predict(&batch_tensor(&refs)?)?;
        for row in logits.data().chunks(classes) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            predictions.push(best);
        }
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let confusion = ConfusionMatrix::from_predictions(classes, &truth, &predictions)?;
    Ok(Evaluation { report: MetricsReport::from_confusion(&confusion)?, predictions })
}

/// Trains in place and leaves the model holding the best-by-test-OA weights
/// (the final weights without a test set).
pub fn train(
    model: &mut Model<f32>,
    train_set: &[PointCloudSample],
    test_set: Option<&[PointCloudSample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let classes = model.config.num_classes;
    let class_weights =
        if cfg.class_weighting { train_class_weights(train_set, classes)? } else { ClassWeights::uniform(classes) };
    if let Some(t) = test_set {
        if let Some(s) = t.iter().find(|s| s.label >= classes) {
            return Err(Error::contract(format!("{}: label {} out of range", s.source_path, s.label)));
        }
    }

    let stream = |id: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(id);
        r
    };
    let (mut order_rng, mut dropout_rng, mut aug_rng) = (stream(ORDER_STREAM), stream(DROPOUT_STREAM), stream(AUGMENT_STREAM));
    let mut adam = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<(String, Tensor<f32>)>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min);
        order.shuffle(&mut order_rng);
        let mut compute = 0.0;
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&PointCloudSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
            let mut points = batch_tensor(&refs)?;
            if let Some(a) = &cfg.augment {
                points = augment_batch_with(&points, a, &mut aug_rng, AugmentHooks::default())?;
            }

            let t0 = Instant::now();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let x = tape.constant(points);
            let mut mode = ForwardMode::train(&mut dropout_rng);
            let logits = model.forward(&mut tape, &vars, x, &mut mode)?;
            let loss = tape.weighted_cross_entropy(logits, &labels, &class_weights.weights)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: value });
            }
            tape.backward(loss)?;
            let grads = model.params.collect_grads(&mut tape, &vars);
            adam.step(&mut model.params, &grads, lr);
            compute += t0.elapsed().as_secs_f64();
            loss_sum += value * labels.len() as f64;
        }

        let (mut test_oa, mut test_ba, mut test_kappa) = (f64::NAN, f64::NAN, f64::NAN);
        if let Some(t) = test_set {
            let r = evaluate(model, t, cfg.batch_size)?.report;
            (test_oa, test_ba, test_kappa) = (r.oa, r.ba, r.kappa);
            if best.as_ref().is_none_or(|(oa, _, _)| r.oa > *oa) {
                best = Some((r.oa, epoch, model.state_dict()));
            }
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            test_oa,
            test_ba,
            test_kappa,
            epoch_time_s: compute,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} test OA {test_oa:.2} BA {test_ba:.2} kappa {test_kappa:.4} ({compute:.1}s)",
            rec.train_loss
        );
        on_epoch(&rec);
        history.push(rec);
    }

    let (best_test_oa, best_epoch) = match best {
        Some((oa, epoch, state)) => {
            model.load_state_dict(&state)?;
            (Some(oa), epoch)
        }
        None => (None, cfg.epochs - 1),
    };
    Ok(TrainReport { history, best_epoch, best_test_oa, class_weights })
}
