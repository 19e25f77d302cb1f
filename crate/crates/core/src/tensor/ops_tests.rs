use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn weights_like(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(shape, &mut rng)
}

/// `sum(f(x) ⊙ r)` for a fixed random `r`, so every output coordinate matters.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(weights_like(t.shape(y), seed));
    let p = t.mul(y, r)?;
    t.sum_all(p)
}

#[test]
fn leaky_relu_example() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = t.leaky_relu(x, 0.2).unwrap();
    assert_eq!(t.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn max_routes_to_argmax() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 5.0, 7.0, 2.0]).unwrap());
    let m = t.max_over_axis(x, 1).unwrap();
    assert_eq!(t.value(m).data(), &[5.0, 7.0]);
    let s = t.sum_all(m).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn max_ties_go_to_lowest_index() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap());
    let m = t.max_over_axis(x, 1).unwrap();
    let s = t.sum_all(m).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randn(&[4, 3], &mut rng);
    let b = randn(&[3, 2], &mut rng);
    let opts = GradCheckOptions { h: 1e-3, kink_tol: f64::INFINITY };
    let bb = b.clone();
    let r = grad_check(
        move |t, x| {
            let b = t.constant(bb.clone());
            let y = t.matmul(x, b)?;
            project(t, y, 5)
        },
        &a,
        opts,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let aa = a.clone();
    let r = grad_check(
        move |t, x| {
            let a = t.constant(aa.clone());
            let y = t.matmul(a, x)?;
            project(t, y, 6)
        },
        &b,
        opts,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn shape_errors_are_descriptive() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("[2, 3]"));
    let c = t.constant(Tensor::zeros(vec![3]));
    assert!(t.add(a, c).is_err());
    assert!(t.concat(&[a, c], 0).is_err());
}

#[test]
fn dropout_probability_is_validated() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![4], 1.0));
    for p in [1.0, -0.1, 1.5] {
        let err = t.dropout(x, p, &mut DropoutMode::Eval).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

#[test]
fn dropout_mask_is_seed_reproducible() {
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::full(vec![64], 1.0));
        let y = t.dropout(x, 0.5, &mut DropoutMode::Train(&mut rng)).unwrap();
        t.value(y).data().to_vec()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    let kept = run(3);
    assert!(kept.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn eval_batch_norm_is_fixed_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&[3, 2, 5], &mut rng);
    let mut state = BatchNormState::<f64> { running_mean: vec![0.3, -0.1], running_var: vec![2.0, 0.5] };
    let before = state.clone();
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let g = t.constant(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
    let b = t.constant(Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
    let y1 = t.batch_norm(xv, g, b, &mut state, false).unwrap();
    let y2 = t.batch_norm(xv, g, b, &mut state, false).unwrap();
    assert_eq!(state, before);
    assert_eq!(t.value(y1), t.value(y2));
    for (l, (&xi, &yi)) in x.data().iter().zip(t.value(y1).data()).enumerate() {
        let c = (l / 5) % 2;
        let (gm, bt) = ([1.5, -0.5][c], [0.1, 0.2][c]);
        let want = gm * (xi - before.running_mean[c]) / (before.running_var[c] + BN_EPS).sqrt() + bt;
        assert!((yi - want).abs() < 1e-12);
    }
}

#[test]
fn training_batch_norm_updates_running_stats() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let g = t.constant(Tensor::full(vec![1], 1.0));
    let b = t.constant(Tensor::zeros(vec![1]));
    let mut state = BatchNormState::new(1);
    let y = t.batch_norm(x, g, b, &mut state, true).unwrap();
    // mean 4, biased var 5, unbiased 20/3
    assert!((state.running_mean[0] - 0.4).abs() < 1e-12);
    assert!((state.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    let out = t.value(y).data();
    assert!((out.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::zeros(vec![3]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn repeated_use_accumulates() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
    let y = t.add(x, x).unwrap();
    let z = t.mul(y, x).unwrap();
    let s = t.sum_all(z).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, -12.0]);
}

fn primitive_programs() -> Vec<(&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>)> {
    let idx = NeighborIndices::new(2, 4, 3, vec![0, 1, 2, 1, 3, 0, 2, 2, 1, 3, 0, 1, 0, 3, 2, 1, 1, 0, 2, 3, 3, 0, 1, 2])
        .unwrap();
    let idx2 = idx.clone();
    vec![
        ("pointwise_conv", vec![2, 3, 5], Box::new(|t: &mut Tape<f64>, x| {
            let w = t.constant(weights_like(&[4, 3], 9));
            let y = t.pointwise_conv(x, w)?;
            project(t, y, 1)
        })),
        ("gather", vec![2, 3, 4], Box::new(move |t: &mut Tape<f64>, x| {
            let y = t.gather_last_axis(x, &idx)?;
            project(t, y, 2)
        })),
        ("concat_slice", vec![2, 3, 4], Box::new(|t: &mut Tape<f64>, x| {
            let s = t.slice_axis(x, 1, 1, 2)?;
            let y = t.concat(&[x, s], 1)?;
            project(t, y, 3)
        })),
        ("mean", vec![3, 4, 2], Box::new(|t: &mut Tape<f64>, x| {
            let y = t.mean_over_axis(x, 1)?;
            project(t, y, 4)
        })),
        ("batch_norm", vec![3, 2, 4], Box::new(|t: &mut Tape<f64>, x| {
            let g = t.constant(Tensor::new(vec![2], vec![1.3, -0.7]).unwrap());
            let b = t.constant(Tensor::new(vec![2], vec![0.2, 0.1]).unwrap());
            let mut st = BatchNormState::new(2);
            let y = t.batch_norm(x, g, b, &mut st, true)?;
            project(t, y, 5)
        })),
        ("l2_norm", vec![2, 3, 4], Box::new(|t: &mut Tape<f64>, x| {
            let y = t.l2_norm_axis(x, 1)?;
            project(t, y, 6)
        })),
        ("normalize", vec![2, 3, 4], Box::new(|t: &mut Tape<f64>, x| {
            let y = t.normalize_axis(x, 1, 1e-8)?;
            project(t, y, 7)
        })),
        ("sub_scale_repeat", vec![2, 2, 4], Box::new(move |t: &mut Tape<f64>, x| {
            let g = t.gather_last_axis(x, &idx2)?;
            let r = t.repeat_last_axis(x, 3)?;
            let d = t.sub(g, r)?;
            let y = t.mul_scalar(d, 0.5)?;
            project(t, y, 8)
        })),
        ("bias", vec![3, 4], Box::new(|t: &mut Tape<f64>, x| {
            let bias = t.constant(weights_like(&[4], 3));
            let y = t.add_bias(x, bias)?;
            let y = t.mul(y, y)?;
            project(t, y, 9)
        })),
    ]
}

#[test]
fn primitives_match_finite_differences() {
    for seed in 0..5 {
        for (name, shape, f) in primitive_programs() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = randn(&shape, &mut rng);
            let r = grad_check(|t, v| f(t, v), &x, GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} seed {seed}: {r:?}");
            assert!(r.excluded * 10 <= x.len(), "{name}: too many kinks {r:?}");
        }
    }
}

fn edge_inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>, NeighborIndices, Tensor<f64>, Tensor<f64>) {
    let (b, c, n, k) = (2, 3, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = randn(&[b, c, n], &mut rng);
    let nbr = randn(&[b, c, n], &mut rng);
    let idx: Vec<u32> = (0..b * n * k).map(|_| rng.random_range(0..n as u32)).collect();
    let idx = NeighborIndices::new(b, n, k, idx).unwrap();
    let gamma = Tensor::new(vec![c], vec![1.2, -0.8, 0.5]).unwrap();
    let beta = Tensor::new(vec![c], vec![0.1, -0.2, 0.3]).unwrap();
    (center, nbr, idx, gamma, beta)
}

#[test]
fn fused_edge_sum_equals_composition() {
    for training in [true, false] {
        for seed in 0..4 {
            let (center, nbr, idx, gamma, beta) = edge_inputs(seed);
            let mut states = [BatchNormState::<f64>::new(3), BatchNormState::<f64>::new(3)];
            for s in &mut states {
                s.running_mean = vec![0.1, -0.3, 0.2];
                s.running_var = vec![1.5, 0.7, 2.0];
            }
            let mut outs = Vec::new();
            let mut grads = Vec::new();
            for (fused, state) in [true, false].into_iter().zip(states.iter_mut()) {
                let mut t = Tape::<f64>::new();
                let c = t.leaf(center.clone());
                let nb = t.leaf(nbr.clone());
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                let y = if fused {
                    t.edge_sum_bn_lrelu_max(c, nb, &idx, g, b, state, training, 0.2).unwrap()
                } else {
                    let gathered = t.gather_last_axis(nb, &idx).unwrap();
                    let rep = t.repeat_last_axis(c, idx.k()).unwrap();
                    let e = t.add(rep, gathered).unwrap();
                    let h = t.batch_norm(e, g, b, state, training).unwrap();
                    let a = t.leaky_relu(h, 0.2).unwrap();
                    t.max_over_axis(a, 3).unwrap()
                };
                outs.push(t.value(y).clone());
                let s = project(&mut t, y, 77).unwrap();
                t.backward(s).unwrap();
                grads.push([c, nb, g, b].map(|v| t.grad(v).unwrap().to_vec()));
            }
            for (a, b) in outs[0].data().iter().zip(outs[1].data()) {
                assert!((a - b).abs() < 1e-12, "forward {a} vs {b}");
            }
            for (ga, gb) in grads[0].iter().zip(&grads[1]) {
                for (a, b) in ga.iter().zip(gb) {
                    assert!((a - b).abs() < 1e-10, "grad {a} vs {b} (training {training})");
                }
            }
            assert_eq!(states[0].running_mean.len(), 3);
            for (a, b) in states[0].running_var.iter().zip(&states[1].running_var) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fused_edge_conv_equals_composition() {
    for training in [true, false] {
        for seed in 0..4 {
            let (b, d, n, k, c) = (2, 5, 6, 3, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            let feats = randn(&[b, d, n, k], &mut rng);
            let w = randn(&[c, d], &mut rng);
            let gamma = Tensor::new(vec![c], vec![0.9, -1.1, 0.0]).unwrap();
            let beta = Tensor::new(vec![c], vec![0.0, 0.4, -0.1]).unwrap();
            let mut results = Vec::new();
            for fused in [true, false] {
                let mut state = BatchNormState::<f64>::new(c);
                let mut t = Tape::<f64>::new();
                let f = t.leaf(feats.clone());
                let wv = t.leaf(w.clone());
                let g = t.leaf(gamma.clone());
                let bt = t.leaf(beta.clone());
                let y = if fused {
                    t.edge_conv_bn_lrelu_max(f, wv, g, bt, &mut state, training, 0.2).unwrap()
                } else {
                    let h = t.pointwise_conv(f, wv).unwrap();
                    let h = t.batch_norm(h, g, bt, &mut state, training).unwrap();
                    let a = t.leaky_relu(h, 0.2).unwrap();
                    t.max_over_axis(a, 3).unwrap()
                };
                let out = t.value(y).clone();
                let s = project(&mut t, y, 78).unwrap();
                t.backward(s).unwrap();
                results.push((out, [f, wv, g, bt].map(|v| t.grad(v).unwrap().to_vec()), state));
            }
            for (a, b) in results[0].0.data().iter().zip(results[1].0.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (ga, gb) in results[0].1.iter().zip(&results[1].1) {
                for (a, b) in ga.iter().zip(gb) {
                    assert!((a - b).abs() < 1e-10, "grad {a} vs {b}");
                }
            }
            assert_eq!(results[0].2.running_mean.len(), c);
            for (a, b) in results[0].2.running_mean.iter().zip(&results[1].2.running_mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fused_kernels_match_finite_differences() {
    for seed in 0..3 {
        let (center, nbr, idx, gamma, beta) = edge_inputs(seed + 9);
        let idx2 = idx.clone();
        let nb = nbr.clone();
        let (g, b) = (gamma.clone(), beta.clone());
        let r = grad_check(
            move |t, x| {
                let n = t.constant(nb.clone());
                let gv = t.constant(g.clone());
                let bv = t.constant(b.clone());
                let mut st = BatchNormState::new(3);
                let y = t.edge_sum_bn_lrelu_max(x, n, &idx2, gv, bv, &mut st, true, 0.2)?;
                project(t, y, 3)
            },
            &center,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
