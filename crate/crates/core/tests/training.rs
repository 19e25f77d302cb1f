use treegraph_core::dataset::PointCloudSample;
use treegraph_core::model::{Model, ModelConfig, Variant};
use treegraph_core::synth;
use treegraph_core::train::{history_csv, read_history_csv, train, TrainConfig};
use treegraph_core::Error;

fn small_model(variant: Variant, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        variant,
        num_classes: 3,
        embedding_dim: 128,
        head_dims: vec![64, 32],
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn single_sample_is_memorized() {
    let (train_set, _) = synth::train_test_split(4, 0, 128, 1).unwrap();
    let one = &train_set[..1];
    // With one sample every head batch norm sees a single row, so the fit has
    // to come from the affine parameters. A larger step and no dropout noise
    // let that happen within 50 epochs.
    let mut model = small_model(Variant::MsdgcnnPp, 0);
    model.config.dropout = 0.0;
    let cfg = TrainConfig { epochs: 50, lr: 1e-2, eta_min: 1e-2, augment: None, ..TrainConfig::default() };
    let report = train(&mut model, one, None, &cfg, |_| {}).unwrap();
    assert_eq!(report.history.len(), 50);
    let last = report.history.last().unwrap().train_loss;
    assert!(last < 1e-2, "final loss {last}");
}

#[test]
fn loss_falls_over_ten_epochs_for_most_seeds() {
    let mut falls = 0;
    let mut log = Vec::new();
    for seed in 0..10 {
        let (train_set, _) = synth::train_test_split(6, 0, 96, 50 + seed).unwrap();
        let mut model = small_model(Variant::MsdgcnnPp, seed);
        let cfg = TrainConfig { epochs: 10, batch_size: 6, seed, ..TrainConfig::default() };
        let h = train(&mut model, &train_set, None, &cfg, |_| {}).unwrap().history;
        let (first, last) = (h[0].train_loss, h[9].train_loss);
        falls += usize::from(last < first);
        log.push((first, last));
    }
    assert!(falls >= 8, "{log:?}");
}

#[test]
fn history_has_one_row_per_epoch_and_round_trips() {
    let (train_set, test_set) = synth::train_test_split(4, 2, 64, 3).unwrap();
    let mut model = small_model(Variant::Dgcnn, 1);
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
    let report = train(&mut model, &train_set, Some(&test_set), &cfg, |_| {}).unwrap();
    let csv = history_csv(&report.history);
    assert_eq!(csv.lines().count(), 4);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    std::fs::write(&p, &csv).unwrap();
    assert_eq!(read_history_csv(&p).unwrap(), report.history);
    let best = report.history.iter().map(|r| r.test_oa).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_test_oa, Some(best));
}

#[test]
fn seeded_runs_repeat_exactly() {
    let (train_set, test_set) = synth::train_test_split(4, 2, 64, 4).unwrap();
    let run = || {
        let mut model = small_model(Variant::MsdgcnnParallel, 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 5, seed: 9, ..TrainConfig::default() };
        let h = train(&mut model, &train_set, Some(&test_set), &cfg, |_| {}).unwrap().history;
        h.into_iter().map(|r| (r.train_loss.to_bits(), r.test_oa.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (mut train_set, _) = synth::train_test_split(4, 0, 64, 5).unwrap();
    train_set.truncate(4);
    // Bypasses the constructor check on purpose.
    train_set[2] = PointCloudSample { points: vec![[f32::NAN; 3]; 64], ..train_set[2].clone() };
    let mut model = small_model(Variant::Dgcnn, 0);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, augment: None, ..TrainConfig::default() };
    match train(&mut model, &train_set, None, &cfg, |_| {}) {
        Err(Error::NonFiniteLoss { epoch: 0, batch: 0, .. }) => {}
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn mismatched_labels_are_rejected() {
    let (train_set, _) = synth::train_test_split(4, 0, 64, 6).unwrap();
    let mut model = Model::<f32>::new(ModelConfig { num_classes: 2, ..ModelConfig::default() }, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(matches!(train(&mut model, &train_set, None, &cfg, |_| {}), Err(Error::Contract(_))));
}
