use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Tensor<f64> = rand_tensor(&mut rng, &[3, 3]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let (i, av) = (tape.constant(eye), tape.constant(a.clone()));
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(z).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![rand_tensor::<f64>(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[5, 3])];
    let rep = finite_diff_check(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            Ok(t.sum(m))
        },
        &params,
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    assert_eq!(rep.checked, 35);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax(x, 0, 1.0).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(t64(&[2], &[1000.0, 0.0]));
    let s = tape.softmax(x, 0, 1.0).unwrap();
    let v = tape.value(s).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.softmax(x, 0, 2.0).unwrap();
    let denom: f64 = [0.5f64, 1.0, 1.5].iter().map(|v| v.exp()).sum();
    for (i, &v) in tape.value(s).data().iter().enumerate() {
        let expect = ((i as f64 + 1.0) / 2.0).exp() / denom;
        assert!((v - expect).abs() < 1e-15, "{v} vs {expect}");
    }

    for bad in [0.0, -1.0] {
        assert!(matches!(tape.softmax(x, 0, bad), Err(TensorError::Config(_))));
    }
}

#[test]
fn softmax_along_inner_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
    let s = tape.softmax(x, 0, 1.0).unwrap();
    let v = tape.value(s);
    assert!((v.at(&[0, 0]) - 0.5).abs() < 1e-15);
    assert!((v.at(&[0, 1]) + v.at(&[1, 1]) - 1.0).abs() < 1e-15);
    assert!(v.at(&[0, 1]) > 0.99);
}

fn conv_single(input: &Tensor<f64>, kernel: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let x = tape.constant(input.reshape(&[1, h, w]).unwrap());
    let k = tape.constant(kernel.clone());
    let y = tape.conv_replicate(x, k).unwrap();
    tape.value(y).reshape(&[h, w]).unwrap()
}

#[test]
fn conv_replicate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input: Tensor<f64> = rand_tensor(&mut rng, &[5, 5]);
    let mut delta = Tensor::zeros(&[3, 3]);
    delta.set(&[1, 1], 1.0);
    assert_eq!(conv_single(&input, &delta), input);

    let constant = Tensor::full(&[4, 6], 0.37);
    let k: Tensor<f64> = Tensor::from_fn(&[3, 3], |i| (i + 1) as f64 / 45.0);
    for &v in conv_single(&constant, &k).data() {
        assert!((v - 0.37).abs() < 1e-15);
    }

    let uniform = Tensor::full(&[3, 3], 1.0 / 9.0);
    let out = conv_single(&input, &uniform);
    for y in 1..4 {
        for x in 1..4 {
            let mut mean = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    mean += input.at(&[y + dy - 1, x + dx - 1]);
                }
            }
            mean /= 9.0;
            assert!((out.at(&[y, x]) - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn conv_rejects_even_kernels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.conv_replicate(x, k), Err(TensorError::Config(_))));
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, w, b), Err(TensorError::Config(_))));
}

#[test]
fn conv2d_zero_pads_and_sums_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
    let b = tape.constant(t64(&[1], &[0.5]));
    let y = tape.conv2d(x, w, b).unwrap();
    let v = tape.value(y);
    // centre sees 9 taps per channel, corner 4
    assert_eq!(v.at(&[0, 0, 1, 1]), 18.5);
    assert_eq!(v.at(&[0, 0, 0, 0]), 8.5);
    assert_eq!(v.at(&[0, 0, 0, 1]), 12.5);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t64(&[2], &[4.0, 4.0]));
    let y = tape.layer_norm(x, 0, g, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.constant(t64(&[2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, 0, g, b).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    let v = tape.value(y).data();
    assert!((v[0] + scale).abs() < 1e-15 && (v[1] - scale).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 32;
    let g = tape.constant(Tensor::ones(&[n]));
    let b = tape.constant(Tensor::zeros(&[n]));
    let x = tape.constant(rand_tensor(&mut rng, &[n]));
    let y = tape.layer_norm(x, 0, g, b).unwrap();
    let v = tape.value(y).data();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() <= 1e-6);
    assert!((var - 1.0).abs() <= 1e-3);
}

#[test]
fn layer_norm_rejects_wrong_gain_length() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(tape.layer_norm(x, 1, g, b).is_err());
}

fn gru_params(rng: &mut ChaCha8Rng, d_in: usize, d: usize) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for _ in 0..3 {
        v.push(rand_tensor(rng, &[d_in, d]));
    }
    for _ in 0..3 {
        v.push(rand_tensor(rng, &[d, d]));
    }
    for _ in 0..4 {
        v.push(rand_tensor(rng, &[d]));
    }
    v
}

fn gru_vars(v: &[Var]) -> GruVars {
    GruVars {
        w_xr: v[0],
        w_xz: v[1],
        w_xn: v[2],
        w_hr: v[3],
        w_hz: v[4],
        w_hn: v[5],
        b_r: v[6],
        b_z: v[7],
        b_xn: v[8],
        b_hn: v[9],
    }
}

#[test]
fn gru_update_gate_saturation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (k, d) = (3, 4);
    let state: Tensor<f64> = rand_tensor(&mut rng, &[k, d]);
    let input: Tensor<f64> = rand_tensor(&mut rng, &[k, d]);
    let mut p = gru_params(&mut rng, d, d);
    p[1] = Tensor::zeros(&[d, d]);
    p[4] = Tensor::zeros(&[d, d]);

    for (bias, expect_state) in [(-1e3, false), (1e3, true)] {
        p[7] = Tensor::full(&[d], bias);
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|t| tape.constant(t.clone())).collect();
        let s = tape.constant(state.clone());
        let x = tape.constant(input.clone());
        let out = gru_cell(&mut tape, s, x, &gru_vars(&vars)).unwrap();
        if expect_state {
            assert_eq!(tape.value(out), &state);
        } else {
            // candidate activation computed independently
            let pv = |i: usize| &p[i];
            let lin = |a: &Tensor<f64>, w: &Tensor<f64>, r: usize, c: usize| -> f64 {
                (0..a.shape()[1]).map(|j| a.at(&[r, j]) * w.at(&[j, c])).sum()
            };
            for r in 0..k {
                for c in 0..d {
                    let rg = sigmoid(lin(&input, pv(0), r, c) + lin(&state, pv(3), r, c) + pv(6).data()[c]);
                    let n = (lin(&input, pv(2), r, c)
                        + pv(8).data()[c]
                        + rg * (lin(&state, pv(5), r, c) + pv(9).data()[c]))
                        .tanh();
                    assert!((tape.value(out).at(&[r, c]) - n).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn gru_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (k, d_in, d) = (2, 3, 4);
    let mut params = vec![rand_tensor::<f64>(&mut rng, &[k, d]), rand_tensor(&mut rng, &[k, d_in])];
    params.extend(gru_params(&mut rng, d_in, d));
    let weights: Tensor<f64> = rand_tensor(&mut rng, &[k, d]);
    let rep = finite_diff_check(
        |t, v| {
            let out = gru_cell(t, v[0], v[1], &gru_vars(&v[2..]))?;
            let w = t.constant(weights.clone());
            let m = t.mul(out, w)?;
            Ok(t.sum(m))
        },
        &params,
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn backward_basic_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv: Tensor<f64> = rand_tensor(&mut rng, &[5]);
    let mut tape = Tape::new();
    let x = tape.param(xv.clone());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);

    let mut tape = Tape::new();
    let x = tape.param(xv.clone());
    let z = tape.constant(Tensor::zeros(&[5]));
    let l = tape.mse(x, z).unwrap();
    let g = tape.backward(l).unwrap();
    for (gv, xv) in g.get(x).unwrap().data().iter().zip(xv.data()) {
        assert!((gv - 2.0 * xv / 5.0).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_leaves_constants_alone() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[3]));
    let c = tape.constant(Tensor::ones(&[3]));
    assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().shape(), &[3]);
}

#[test]
fn finite_diff_on_quadratic() {
    let rep = finite_diff_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[Tensor::<f64>::scalar(3.0)],
        1e-5,
        None,
    )
    .unwrap();
    assert_eq!(rep.tape_grad, 6.0);
    assert!((rep.numeric_grad - 6.0).abs() <= 1e-6);
}

#[test]
fn finite_diff_reports_nan() {
    let res = finite_diff_check(
        |t, v| {
            let z = t.affine(v[0], 0.0, f64::NAN);
            Ok(t.sum(z))
        },
        &[Tensor::<f64>::scalar(1.0)],
        1e-5,
        None,
    );
    assert!(matches!(res, Err(TensorError::NonFinite(_))));
}

#[test]
fn finite_diff_softmax_cross_composition() {
    // softmax compared against a fixed target distribution
    let rep = finite_diff_check(
        |t, v| {
            let s = t.softmax(v[0], 0, 1.0)?;
            let target = t.constant(Tensor::from_f64(&[4], &[0.1, 0.2, 0.6, 0.1])?);
            let d = t.sub(s, target)?;
            let sq = t.mul(d, d)?;
            let th = t.tanh(sq);
            Ok(t.sum(th))
        },
        &[Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.5]).unwrap()],
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
}

#[test]
fn finite_diff_conv_kernel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input: Tensor<f64> = rand_tensor(&mut rng, &[1, 6, 6]);
    let weights: Tensor<f64> = rand_tensor(&mut rng, &[1, 6, 6]);
    let kernel: Tensor<f64> = rand_tensor(&mut rng, &[3, 3]);
    let rep = finite_diff_check(
        |t, v| {
            let y = t.conv_replicate(v[1], v[0])?;
            let w = t.constant(weights.clone());
            let m = t.mul(y, w)?;
            Ok(t.sum(m))
        },
        &[kernel, input],
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
}

/// A graph exercising every primitive op.
fn composed<T: Real>(t: &mut Tape<T>, v: &[Var], w: &Tensor<T>) -> Result<Var, TensorError> {
    let (x, wm, g, b, img, ker, k1) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let h = t.matmul(x, wm)?; // [3,4]
    let h = t.add_row(h, b)?;
    let h = t.layer_norm(h, 1, g, b)?;
    let s = t.softmax(h, 1, T::lit(1.5))?;
    let th = t.tanh(h);
    let sg = t.sigmoid(th);
    let m = t.mul(s, sg)?;
    let d = t.affine(sg, T::lit(2.0), T::lit(1.0));
    let q = t.div(m, d)?;
    let q = t.permute(q, &[1, 0])?; // [4,3]
    let col = t.sum_axis(q, 0)?; // [3]
    let col = t.reshape(col, &[1, 3])?;
    let e = t.expand(col, &[4, 3])?;
    let e = t.sub(e, q)?;
    let sel = t.select_rows(e, &[2, 0])?;
    let sl = t.slice(e, 1, 1, 2)?;
    let sl = t.relu(sl);
    let conv = t.conv_replicate(img, ker)?; // [2,4,4]
    let conv_in = t.reshape(conv, &[1, 2, 4, 4])?;
    let kb = t.constant(Tensor::zeros(&[1]));
    let c2 = t.conv2d(conv_in, k1, kb)?;
    let wv = t.constant(w.clone());
    let c2 = t.reshape(c2, &[16])?;
    let c2 = t.mul(c2, wv)?;
    let a = t.sum(sel);
    let b2 = t.mean(sl);
    let c = t.sum(c2);
    let ab = t.add(a, b2)?;
    t.add(ab, c)
}

fn composed_params<T: Real>(rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
    let mut p = vec![
        rand_tensor(rng, &[3, 5]),
        rand_tensor(rng, &[5, 4]),
        rand_tensor(rng, &[4]),
        rand_tensor(rng, &[4]),
        rand_tensor(rng, &[2, 4, 4]),
        rand_tensor(rng, &[3, 3]),
        rand_tensor(rng, &[1, 2, 3, 3]),
    ];
    // keep relu inputs away from the kink
    p[0] = p[0].map(|v| v * T::lit(2.0));
    p
}

#[test]
fn composed_graph_matches_finite_differences_100_trials() {
    let mut worst64: f64 = 0.0;
    let mut worst32: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let params: Vec<Tensor<f64>> = composed_params(&mut rng);
        let w: Tensor<f64> = rand_tensor(&mut rng, &[16]);
        let rep = finite_diff_check(|t, v| composed(t, v, &w), &params, 3e-5, None).unwrap();
        worst64 = worst64.max(rep.max_rel_error);

        // 32-bit tape gradient against the 64-bit central-difference oracle
        let p32: Vec<Tensor<f32>> = params.iter().map(|p| p.cast()).collect();
        let w32: Tensor<f32> = w.cast();
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = p32.iter().map(|p| tape.param(p.clone())).collect();
        let loss = composed(&mut tape, &vars, &w32).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p64: Vec<Tensor<f64>> = p32.iter().map(|p| p.cast()).collect();
        let w64: Tensor<f64> = w32.cast();
        let h = 1e-6;
        let eval = |ps: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let v: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
            let l = composed(&mut t, &v, &w64).unwrap();
            t.value(l).item()
        };
        let mut work = p64.clone();
        for (pi, var) in vars.iter().enumerate() {
            let g = grads.get_or_zeros(*var, p32[pi].shape());
            // f32 cancellation: relative to the tensor's gradient scale
            let floor = 1e-3 * g.data().iter().fold(1e-8f64, |m, v| m.max(v.abs() as f64));
            for ei in 0..p64[pi].len() {
                let orig = p64[pi].data()[ei];
                work[pi].data_mut()[ei] = orig + h;
                let up = eval(&work);
                work[pi].data_mut()[ei] = orig - h;
                let down = eval(&work);
                work[pi].data_mut()[ei] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = g.data()[ei] as f64;
                let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst32 = worst32.max(e);
            }
        }
    }
    assert!(worst64 <= 1e-5, "64-bit worst relative error {worst64}");
    assert!(worst32 <= 1e-3, "32-bit worst relative error {worst32}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params: Vec<Tensor<f32>> = composed_params(&mut rng);
        let w: Tensor<f32> = rand_tensor(&mut rng, &[16]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = composed(&mut tape, &vars, &w).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut bits = vec![tape.value(loss).item().to_bits()];
        for v in vars {
            bits.extend(grads.get(v).unwrap().data().iter().map(|x| x.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        vals in prop::collection::vec(-50.0f64..50.0, 12),
        tau in 0.1f64..5.0,
        axis in 0usize..2,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals.clone()).unwrap());
        let s = tape.softmax(x, axis, tau).unwrap();
        let sums = tape.sum_axis(s, axis).unwrap();
        for &v in tape.value(sums).data() {
            prop_assert!((v - 1.0).abs() <= 1e-12);
        }

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals.iter().map(|&v| v as f32).collect()).unwrap());
        let s = tape.softmax(x, axis, tau as f32).unwrap();
        let sums = tape.sum_axis(s, axis).unwrap();
        for &v in tape.value(sums).data() {
            prop_assert!((v - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn simplex_kernel_conv_stays_in_range(
        vals in prop::collection::vec(-10.0f64..10.0, 35),
        raw in prop::collection::vec(0.0f64..1.0, 9),
    ) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let kernel = Tensor::new(&[3, 3], raw.iter().map(|v| (v + 1e-9 / 9.0) / total).collect()).unwrap();
        let input = Tensor::new(&[5, 7], vals).unwrap();
        let out = conv_single(&input, &kernel);
        let ksum: f64 = kernel.sum();
        // a kernel summing to 1 − δ can undershoot by at most δ·max|x|
        let slack = (1.0 - ksum).abs() * 10.0 + 1e-12;
        prop_assert!(out.max_value() <= input.max_value() + slack);
        prop_assert!(out.min_value() >= input.min_value() - slack);
    }
}
