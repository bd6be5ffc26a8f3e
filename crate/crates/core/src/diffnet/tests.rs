use super::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-10 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

fn spec(widths: &[usize], act: Activation, bn: bool) -> NetSpec {
    NetSpec::new(widths.to_vec(), act, bn).unwrap()
}

fn random_data(seed: u64, n: usize, d_in: usize, d_out: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = crate::rng::rng_from(seed);
    let x = DMatrix::from_fn(n, d_in, |_, _| rng.random_range(-1.0..1.0));
    let t = DMatrix::from_fn(n, d_out, |_, _| rng.random_range(-1.5..1.5));
    (x, t)
}

/// Central finite differences of the loss, evaluated through the forward
/// pass only (independent of the reverse-mode path under test).
fn numeric_grad(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    bn: Option<&BatchNormState>,
    h: f64,
) -> DVector<f64> {
    let flat = params.flatten();
    let mut g = DVector::zeros(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = {
            let p = unflatten(spec, &plus).unwrap();
            let (out, _) = forward(spec, &p, x, bn).unwrap();
            mse_loss(&out, t).unwrap()
        };
        let lm = {
            let p = unflatten(spec, &minus).unwrap();
            let (out, _) = forward(spec, &p, x, bn).unwrap();
            mse_loss(&out, t).unwrap()
        };
        g[i] = (lp - lm) / (2.0 * h);
    }
    g
}

#[test]
fn init_is_deterministic() {
    let s = spec(&[3, 5, 2], Activation::ReLU, false);
    let a = init_params(&s, 99);
    let b = init_params(&s, 99);
    assert_eq!(a, b);
    let c = init_params(&s, 100);
    assert_ne!(a, c);
}

#[test]
fn init_biases_are_zero() {
    let s = spec(&[1, 1, 1], Activation::Sigmoid, false);
    let p = init_params(&s, 7);
    for b in &p.biases {
        assert!(b.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn init_weight_mean_is_centered() {
    // 10^5 weights in one 100x1000 layer; uniform(-1/sqrt(1000), ..) has mean 0.
    let s = spec(&[1000, 100, 1], Activation::Identity, false);
    let p = init_params(&s, 1234);
    let w = &p.weights[0];
    assert_eq!(w.len(), 100_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    let bound = 1.0 / (1000f64).sqrt();
    assert!(w.iter().all(|&x| x.abs() < bound));
}

#[test]
fn forward_zero_params_is_zero_map() {
    let s = spec(&[2, 4, 3], Activation::Identity, false);
    let p = NetParams {
        weights: vec![DMatrix::zeros(4, 2), DMatrix::zeros(3, 4)],
        biases: vec![DVector::zeros(4), DVector::zeros(3)],
    };
    let (x, _) = random_data(1, 5, 2, 3);
    let (out, _) = forward(&s, &p, &x, None).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn relu_kills_negative_preactivations() {
    // Identity-like hidden layer with negated weights: all pre-activations
    // negative for positive inputs, so the hidden trace is exactly zero.
    let s = spec(&[2, 2, 1], Activation::ReLU, false);
    let p = NetParams {
        weights: vec![
            -DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        ],
        biases: vec![DVector::zeros(2), DVector::zeros(1)],
    };
    let x = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.2, 0.3, 2.0, 0.1]);
    let (out, trace) = forward(&s, &p, &x, None).unwrap();
    assert!(trace.layers[0].iter().all(|&v| v == 0.0));
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_matches_explicit_matrix_product() {
    let s = spec(&[3, 4, 2], Activation::Identity, false);
    let p = init_params(&s, 42);
    let (x, _) = random_data(2, 6, 3, 2);
    let (out, _) = forward(&s, &p, &x, None).unwrap();

    // Direct oracle: W2(W1 xᵀ + b1) + b2, computed with nalgebra ops.
    let ones = DMatrix::from_element(6, 1, 1.0);
    let h1 = &x * p.weights[0].transpose() + &ones * p.biases[0].transpose();
    let expect = &h1 * p.weights[1].transpose() + &ones * p.biases[1].transpose();
    for (a, b) in out.iter().zip(expect.iter()) {
        assert!(rel_err(*a, *b) <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn mse_loss_basics() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);

    let b = a.map(|v| v + 2.0);
    assert_eq!(mse_loss(&a, &b).unwrap(), 4.0);

    // Hand-summed 3x1 case.
    let p = DMatrix::from_row_slice(3, 1, &[0.5, -1.25, 2.0]);
    let t = DMatrix::from_row_slice(3, 1, &[0.0, 0.75, -0.5]);
    let expect = (0.5f64.powi(2) + 2.0f64.powi(2) + 2.5f64.powi(2)) / 3.0;
    assert!((mse_loss(&p, &t).unwrap() - expect).abs() < 1e-15);

    let c = DMatrix::zeros(2, 3);
    assert!(mse_loss(&a, &c).is_err());
}

#[test]
fn grad_is_zero_at_zero_residual() {
    let s = spec(&[2, 3, 2], Activation::Identity, false);
    let p = init_params(&s, 5);
    let (x, _) = random_data(3, 4, 2, 2);
    let (t, _) = forward(&s, &p, &x, None).unwrap();
    let (loss, g) = loss_grad(&s, &p, &x, &t, None).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_matches_finite_differences_smooth_nets() {
    // Sigmoid and identity activations, with and without batchnorm. Batch
    // statistics raise the third derivatives, so BN cases use a finer step
    // to keep central-difference truncation below the tolerance.
    let cases = [
        (vec![1, 6, 6, 1], Activation::Sigmoid, false, 1e-4),
        (vec![2, 5, 3], Activation::Sigmoid, true, 1e-5),
        (vec![3, 4, 4, 2], Activation::Identity, true, 1e-5),
        (vec![1, 8, 8, 1], Activation::Sigmoid, false, 1e-4),
    ];
    for (ci, (widths, act, use_bn, h)) in cases.iter().enumerate() {
        let s = spec(widths, *act, *use_bn);
        assert!(s.param_count() <= 200);
        let p = init_params(&s, 1000 + ci as u64);
        let bn_state = use_bn.then(|| BatchNormState::new(&s));
        let (x, t) = random_data(2000 + ci as u64, 8, s.input_dim(), s.output_dim());
        let (_, g) = loss_grad(&s, &p, &x, &t, bn_state.as_ref()).unwrap();
        let num = numeric_grad(&s, &p, &x, &t, bn_state.as_ref(), *h);
        let flat = g.flatten();
        let worst = (0..flat.len())
            .map(|i| rel_err(flat[i], num[i]))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "case {ci}: worst rel err {worst}");
    }
}

#[test]
fn grad_unchanged_when_rows_duplicated() {
    let s = spec(&[2, 5, 1], Activation::Sigmoid, false);
    let p = init_params(&s, 3);
    let (x, t) = random_data(4, 5, 2, 1);
    let mut x2 = DMatrix::zeros(10, 2);
    let mut t2 = DMatrix::zeros(10, 1);
    for i in 0..5 {
        for j in 0..2 {
            x2[(i, j)] = x[(i, j)];
            x2[(i + 5, j)] = x[(i, j)];
        }
        t2[(i, 0)] = t[(i, 0)];
        t2[(i + 5, 0)] = t[(i, 0)];
    }
    let (l1, g1) = loss_grad(&s, &p, &x, &t, None).unwrap();
    let (l2, g2) = loss_grad(&s, &p, &x2, &t2, None).unwrap();
    assert!(rel_err(l1, l2) <= 1e-12);
    let (f1, f2) = (g1.flatten(), g2.flatten());
    for i in 0..f1.len() {
        assert!(rel_err(f1[i], f2[i]) <= 1e-12);
    }
}

#[test]
fn hvp_of_zero_vector_is_zero() {
    let s = spec(&[2, 4, 1], Activation::Sigmoid, false);
    let p = init_params(&s, 11);
    let (x, t) = random_data(12, 6, 2, 1);
    let v = DVector::zeros(s.param_count());
    let hv = hessian_vector_product(&s, &p, &x, &t, &v, None).unwrap();
    assert!(hv.iter().all(|&e| e == 0.0));
}

#[test]
fn hvp_matches_finite_difference_of_gradients() {
    let cases = [
        (vec![1, 5, 5, 1], Activation::Sigmoid, false),
        (vec![2, 4, 2], Activation::Sigmoid, true),
    ];
    for (ci, (widths, act, use_bn)) in cases.iter().enumerate() {
        let s = spec(widths, *act, *use_bn);
        let p = init_params(&s, 300 + ci as u64);
        let bn_state = use_bn.then(|| BatchNormState::new(&s));
        let (x, t) = random_data(400 + ci as u64, 7, s.input_dim(), s.output_dim());
        let n_params = s.param_count();
        let flat = p.flatten();
        let h = 1e-4;
        // Probe a handful of unit directions.
        for i in (0..n_params).step_by(n_params / 7 + 1) {
            let mut e = DVector::zeros(n_params);
            e[i] = 1.0;
            let hv = hessian_vector_product(&s, &p, &x, &t, &e, bn_state.as_ref()).unwrap();

            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let gp = loss_grad(&s, &unflatten(&s, &plus).unwrap(), &x, &t, bn_state.as_ref())
                .unwrap()
                .1
                .flatten();
            let gm = loss_grad(&s, &unflatten(&s, &minus).unwrap(), &x, &t, bn_state.as_ref())
                .unwrap()
                .1
                .flatten();
            for j in 0..n_params {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!(
                    rel_err(hv[j], fd) <= 1e-4,
                    "case {ci} H[{j},{i}]: {} vs fd {}",
                    hv[j],
                    fd
                );
            }
        }
    }
}

#[test]
fn hvp_is_linear() {
    let s = spec(&[2, 5, 2], Activation::Sigmoid, false);
    let p = init_params(&s, 21);
    let (x, t) = random_data(22, 6, 2, 2);
    let n = s.param_count();
    let mut rng = crate::rng::rng_from(23);
    let v1 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let v2 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let (a, b) = (0.7, -1.3);
    let combo = &v1 * a + &v2 * b;
    let h_combo = hessian_vector_product(&s, &p, &x, &t, &combo, None).unwrap();
    let h1 = hessian_vector_product(&s, &p, &x, &t, &v1, None).unwrap();
    let h2 = hessian_vector_product(&s, &p, &x, &t, &v2, None).unwrap();
    let expect = h1 * a + h2 * b;
    for i in 0..n {
        assert!((h_combo[i] - expect[i]).abs() <= 1e-10 * (1.0 + expect[i].abs()));
    }
}

#[test]
fn relu_grad_and_hvp_away_from_kinks() {
    // Pick the first seed whose pre-activations all sit >= 1e-3 from the
    // ReLU kink, then run the finite-difference checks there.
    let s = spec(&[2, 6, 6, 1], Activation::ReLU, false);
    let mut found = None;
    'search: for seed in 0..200u64 {
        let p = init_params(&s, seed);
        let (x, t) = random_data(seed.wrapping_add(777), 6, 2, 1);
        let (_, trace) = forward(&s, &p, &x, None).unwrap();
        // Reconstruct pre-activations layer by layer with plain matrix math.
        let mut a = x.clone();
        for l in 0..s.layer_count() - 1 {
            let ones = DMatrix::from_element(a.nrows(), 1, 1.0);
            let z = &a * p.weights[l].transpose() + &ones * p.biases[l].transpose();
            if z.iter().any(|&v| v.abs() < 1e-3) {
                continue 'search;
            }
            a = trace.layers[l].clone();
        }
        found = Some((p, x, t));
        break;
    }
    let (p, x, t) = found.expect("no kink-free configuration found");

    let (_, g) = loss_grad(&s, &p, &x, &t, None).unwrap();
    let num = numeric_grad(&s, &p, &x, &t, None, 1e-4);
    let flat = g.flatten();
    for i in 0..flat.len() {
        assert!(rel_err(flat[i], num[i]) <= 1e-6);
    }

    let mut e = DVector::zeros(s.param_count());
    e[3] = 1.0;
    let hv = hessian_vector_product(&s, &p, &x, &t, &e, None).unwrap();
    let h = 1e-4;
    let fp = p.flatten();
    let mut plus = fp.clone();
    plus[3] += h;
    let mut minus = fp;
    minus[3] -= h;
    let gp = loss_grad(&s, &unflatten(&s, &plus).unwrap(), &x, &t, None)
        .unwrap()
        .1
        .flatten();
    let gm = loss_grad(&s, &unflatten(&s, &minus).unwrap(), &x, &t, None)
        .unwrap()
        .1
        .flatten();
    for j in 0..flat.len() {
        let fd = (gp[j] - gm[j]) / (2.0 * h);
        assert!(rel_err(hv[j], fd) <= 1e-4);
    }
}

#[test]
fn flatten_unflatten_roundtrip_and_count() {
    let s = spec(&[2, 3, 2], Activation::ReLU, false);
    assert_eq!(s.param_count(), 3 * 3 + 2 * 4);
    let p = init_params(&s, 64);
    let flat = p.flatten();
    assert_eq!(flat.len(), s.param_count());
    let back = unflatten(&s, &flat).unwrap();
    assert_eq!(back, p);

    let short = DVector::zeros(s.param_count() - 1);
    assert!(unflatten(&s, &short).is_err());
}

#[test]
fn flat_index_maps_to_exactly_one_entry() {
    // Layout on [2,3,2]: W1 row-major (6), b1 (3), W2 (6), b2 (2).
    let s = spec(&[2, 3, 2], Activation::Identity, false);
    let p = init_params(&s, 8);
    let base = p.flatten();
    for i in 0..s.param_count() {
        let mut bumped = base.clone();
        bumped[i] += 1.0;
        let q = unflatten(&s, &bumped).unwrap();
        let mut changed = Vec::new();
        for l in 0..2 {
            for r in 0..q.weights[l].nrows() {
                for c in 0..q.weights[l].ncols() {
                    if q.weights[l][(r, c)] != p.weights[l][(r, c)] {
                        changed.push(("w", l, r, c));
                    }
                }
            }
            for r in 0..q.biases[l].len() {
                if q.biases[l][r] != p.biases[l][r] {
                    changed.push(("b", l, r, 0));
                }
            }
        }
        assert_eq!(changed.len(), 1, "flat index {i} changed {changed:?}");
        let expect = match i {
            0..=5 => ("w", 0usize, i / 2, i % 2),
            6..=8 => ("b", 0, i - 6, 0),
            9..=14 => ("w", 1, (i - 9) / 3, (i - 9) % 3),
            _ => ("b", 1, i - 15, 0),
        };
        assert_eq!(changed[0], expect, "flat index {i}");
    }
}

#[test]
fn forward_is_pure() {
    let s = spec(&[2, 4, 4, 1], Activation::ReLU, true);
    let p = init_params(&s, 31);
    let bn = BatchNormState::new(&s);
    let (x, _) = random_data(32, 5, 2, 1);
    let (o1, t1) = forward(&s, &p, &x, Some(&bn)).unwrap();
    let (o2, t2) = forward(&s, &p, &x, Some(&bn)).unwrap();
    assert_eq!(o1, o2);
    for (a, b) in t1.layers.iter().zip(&t2.layers) {
        assert_eq!(a, b);
    }
}

#[test]
fn batchnorm_is_invariant_to_constant_row_shift() {
    let s = spec(&[2, 5, 5, 1], Activation::Sigmoid, true);
    let p = init_params(&s, 41);
    let bn = BatchNormState::new(&s);
    let (x, _) = random_data(43, 8, 2, 1);
    let mut shifted = x.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, 0)] += 3.7;
        shifted[(i, 1)] -= 1.9;
    }
    let (_, ta) = forward(&s, &p, &x, Some(&bn)).unwrap();
    let (_, tb) = forward(&s, &p, &shifted, Some(&bn)).unwrap();
    for (ha, hb) in ta.hidden().iter().zip(tb.hidden()) {
        for (a, b) in ha.iter().zip(hb.iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn batchnorm_running_stats_update() {
    let s = spec(&[1, 3, 1], Activation::ReLU, true);
    let p = init_params(&s, 51);
    let mut bn = BatchNormState::new(&s);
    let (x, _) = random_data(52, 6, 1, 1);
    let (_, trace) = forward(&s, &p, &x, Some(&bn)).unwrap();
    let batch_mean = trace.batch_means.as_ref().unwrap()[0].clone();
    bn.absorb_trace(&trace).unwrap();
    // running ← 0.9·0 + 0.1·batch
    for j in 0..3 {
        assert!((bn.running_mean[0][j] - 0.1 * batch_mean[j]).abs() < 1e-15);
        assert!(bn.running_var[0].iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn batch_mode_rejects_single_row() {
    let s = spec(&[2, 3, 1], Activation::ReLU, true);
    let p = init_params(&s, 61);
    let bn = BatchNormState::new(&s);
    let x = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
    match forward(&s, &p, &x, Some(&bn)) {
        Err(Error::BatchTooSmall(1)) => {}
        other => panic!("expected BatchTooSmall, got {other:?}"),
    }

    // Running-stats mode accepts a single row.
    let mut bn_run = BatchNormState::new(&s);
    bn_run.mode = BnMode::RunningStats;
    assert!(forward(&s, &p, &x, Some(&bn_run)).is_ok());
}

#[test]
fn dimension_errors_are_reported() {
    let s = spec(&[2, 3, 1], Activation::ReLU, false);
    let p = init_params(&s, 71);
    let x_bad = DMatrix::zeros(4, 3);
    assert!(forward(&s, &p, &x_bad, None).is_err());

    let (x, _) = random_data(72, 4, 2, 1);
    let t_bad = DMatrix::zeros(4, 2);
    assert!(loss_grad(&s, &p, &x, &t_bad, None).is_err());

    let v_bad = DVector::zeros(3);
    let t = DMatrix::zeros(4, 1);
    assert!(hessian_vector_product(&s, &p, &x, &t, &v_bad, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_flatten_unflatten_identity(
        seed in 0u64..1_000_000,
        w1 in 1usize..5,
        w2 in 1usize..5,
        w3 in 1usize..5,
    ) {
        let s = spec(&[w1, w2, w3], Activation::ReLU, false);
        let p = init_params(&s, seed);
        let back = unflatten(&s, &p.flatten()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn prop_mse_nonnegative_and_symmetric(seed in 0u64..1_000_000) {
        let (a, b) = random_data(seed, 4, 3, 3);
        let ab = mse_loss(&a, &b).unwrap();
        let ba = mse_loss(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
    }
}
