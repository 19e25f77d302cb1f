use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, GradCheckOptions};

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        scales: ScaleTriple::new(2, 4, 8).unwrap(),
        backbone_k: 4,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

fn cloud<S: Real>(b: usize, n: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![b, 3, n], |_| S::lit(rng.random_range(-1.0..1.0)))
}

fn within(count: usize, target: f64, tol: f64) -> bool {
    (count as f64 - target).abs() <= tol * target
}

#[test]
fn parameter_counts_match_reference_sizes() {
    let pp = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    assert!(within(pp.parameter_count(), 1.81e6, 0.05), "{}", pp.parameter_count());
    let dg = Model::<f32>::new(ModelConfig { variant: Variant::Dgcnn, ..Default::default() }, 0).unwrap();
    assert!(within(dg.parameter_count(), 1.80e6, 0.05), "{}", dg.parameter_count());
    let par = Model::<f32>::new(ModelConfig { variant: Variant::MsdgcnnParallel, ..Default::default() }, 0).unwrap();
    assert!(within(par.parameter_count(), 1.55e6, 0.10), "{}", par.parameter_count());
    let s = pp.summary();
    assert_eq!(s.parameter_count, s.layers.iter().map(|(_, sh)| sh.iter().product::<usize>()).sum::<usize>());
    assert!(s.layers.iter().any(|(n, _)| n == "fusion.psi.weight"));
}

#[test]
fn logits_shape_and_softmax() {
    for v in Variant::ALL {
        let mut m = Model::<f32>::new(small(v), 1).unwrap();
        let y = m.predict(&cloud(2, 16, 3)).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        for row in y.data().chunks(3) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            let p: f64 = row.iter().map(|&v| ((v - mx) as f64).exp() / z).sum();
            assert!((p - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_is_deterministic_and_permutation_invariant() {
    let mut m = Model::<f32>::new(small(Variant::MsdgcnnPp), 2).unwrap();
    let x = cloud::<f32>(1, 20, 4);
    let a = m.predict(&x).unwrap();
    assert_eq!(a, m.predict(&x).unwrap());
    let perm: Vec<usize> = (0..20).rev().collect();
    let xp = Tensor::from_fn(vec![1, 3, 20], |e| x.data()[(e / 20) * 20 + perm[e % 20]]);
    for (u, v) in a.data().iter().zip(m.predict(&xp).unwrap().data()) {
        assert!((u - v).abs() < 1e-4, "{u} vs {v}");
    }
}

#[test]
fn duplicated_batch_rows_match() {
    let mut m = Model::<f32>::new(small(Variant::MsdgcnnPp), 5).unwrap();
    let x = cloud::<f32>(1, 16, 6);
    let mut data = x.data().to_vec();
    data.extend_from_slice(x.data());
    let xx = Tensor::new(vec![2, 3, 16], data).unwrap();
    let mut tape = Tape::new();
    let params = m.params.bind(&mut tape, false);
    let p = tape.constant(xx);
    let z = m.fusion_forward(&mut tape, &params, p, false).unwrap();
    assert_eq!(tape.shape(z), &[2, 64, 16]);
    let d = tape.value(z).data();
    assert_eq!(d[..64 * 16], d[64 * 16..]);
}

#[test]
fn keep_all_dropout_equals_eval() {
    let mut m = Model::<f32>::new(small(Variant::Dgcnn), 7).unwrap();
    let x = cloud::<f32>(3, 12, 8);
    let eval = m.predict(&x).unwrap();
    let mut tape = Tape::new();
    let params = m.params.bind(&mut tape, false);
    let p = tape.constant(x);
    let y = m.forward(&mut tape, &params, p, &mut ForwardMode::keep_all(false)).unwrap();
    assert_eq!(tape.value(y), &eval);
}

#[test]
fn fused_and_reference_forward_agree() {
    for v in Variant::ALL {
        let mut a = Model::<f64>::new(small(v), 9).unwrap();
        let mut b = a.clone();
        b.fused = false;
        let x = cloud::<f64>(2, 14, 10);
        let mut outs = Vec::new();
        for m in [&mut a, &mut b] {
            let mut tape = Tape::new();
            let params = m.params.bind(&mut tape, true);
            let p = tape.constant(x.clone());
            let y = m.forward(&mut tape, &params, p, &mut ForwardMode::keep_all(true)).unwrap();
            let s = tape.sum_all(y).unwrap();
            tape.backward(s).unwrap();
            outs.push((tape.value(y).clone(), m.params.collect_grads(&mut tape, &params)));
        }
        for (u, w) in outs[0].0.data().iter().zip(outs[1].0.data()) {
            assert!((u - w).abs() < 1e-9, "{v}: {u} vs {w}");
        }
        for (ga, gb) in outs[0].1.iter().zip(&outs[1].1) {
            for (u, w) in ga.iter().zip(gb) {
                assert!((u - w).abs() < 1e-7, "{v}: grad {u} vs {w}");
            }
        }
    }
}

#[test]
fn fusion_gradient_matches_finite_differences() {
    let cfg = ModelConfig { fusion_width: 8, ..small(Variant::MsdgcnnPp) };
    let m = Model::<f64>::new(cfg, 11).unwrap();
    let x = cloud::<f64>(1, 60, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let r = Tensor::<f64>::from_fn(vec![1, 8, 60], |_| rng.random_range(-1.0..1.0));
    let report = grad_check(
        |tape, p| {
            let mut m = m.clone();
            let params = m.params.bind(tape, false);
            let z = m.fusion_forward(tape, &params, p, true)?;
            let rv = tape.constant(r.clone());
            let y = tape.mul(z, rv)?;
            tape.sum_all(y)
        },
        &x,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn checkpoint_roundtrip_reproduces_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tgnw");
    let mut m = Model::<f32>::new(small(Variant::MsdgcnnParallel), 14).unwrap();
    // move running statistics away from their initial values
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let params = m.params.bind(&mut tape, false);
    let p = tape.constant(cloud(4, 16, 15));
    m.forward(&mut tape, &params, p, &mut ForwardMode::train(&mut rng)).unwrap();
    m.save(&path).unwrap();
    let mut back = Model::<f32>::load(&path).unwrap();
    let x = cloud::<f32>(2, 16, 16);
    let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(m.state_dict(), back.state_dict());
}

#[test]
fn config_roundtrip_and_errors() {
    let cfg = small(Variant::Dgcnn);
    assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(matches!("pointnet".parse::<Variant>(), Err(Error::Config(_))));
    assert!(matches!(ModelConfig::from_toml("variant = \"pointnet\""), Err(Error::Config(_))));
    let bad = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
    assert!(Model::<f32>::new(bad, 0).is_err());
    let mut m = Model::<f32>::new(small(Variant::MsdgcnnPp), 0).unwrap();
    assert!(matches!(m.predict(&cloud(1, 6, 0)), Err(Error::Contract(_))));
}

#[test]
fn uniform_scales_keep_distinct_channel_counts() {
    let cfg = ModelConfig { scales: ScaleTriple::uniform(4), ..small(Variant::MsdgcnnPp) };
    let m = Model::<f32>::new(cfg, 0).unwrap();
    let shapes: Vec<_> = (1..=3)
        .map(|s| m.params.get(m.params.find(&format!("fusion.phi{s}.weight")).unwrap()).tensor.shape().to_vec())
        .collect();
    assert_eq!(shapes, vec![vec![64, 6], vec![64, 9], vec![64, 7]]);
}
