use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::compare_gradients;
use super::kernels::ConvGeom;
use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform_tensor(shape, 1.0, rng)
}

#[test]
fn matmul_identity_and_small_case() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.leaf(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a_val = t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
    let a = tape.leaf(a_val.clone());
    let out = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(out), &a_val);

    let x = tape.leaf(t64(&[2, 2], &[1., 2., 3., 4.]));
    let y = tape.leaf(t64(&[2, 1], &[0., 1.]));
    let out = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
    assert_eq!(tape.shape(out), &[2, 1]);
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[4, 5]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[3, 3], &[0., 0., 0., 1000., 0., 0., 2f64.ln(), 0., f64::NEG_INFINITY]));
    let y = tape.softmax_rows(x).unwrap();
    let v = tape.value(y).data();
    for p in &v[0..3] {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300);
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[6] - 2.0 / 3.0).abs() < 1e-15);
    assert!((v[7] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap());
    assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
}

/// Scalar-loop MLP used as an oracle for `mlp_forward`.
fn mlp_oracle(x: &[Vec<f64>], params: &ParamSet<f64>, prefix: &str, dims: &[usize]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    for l in 0..dims.len() - 1 {
        let w = params.get(&format!("{prefix}.{l}.weight")).unwrap();
        let b = params.get(&format!("{prefix}.{l}.bias")).unwrap();
        h = h
            .iter()
            .map(|row| {
                (0..dims[l + 1])
                    .map(|o| {
                        let mut s = b.data()[o];
                        for (i, xi) in row.iter().enumerate() {
                            s += xi * w.get(&[i, o]);
                        }
                        if l + 2 < dims.len() {
                            s.max(0.0)
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect();
    }
    h
}

#[test]
fn mlp_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = [8, 16, 32];
    let mut params = ParamSet::new();
    init_mlp(&mut params, "net", &dims, &mut rng).unwrap();
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") {
            *t = uniform_tensor(t.shape(), 0.5, &mut rng);
        }
    }
    let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&rows).unwrap());
    let y = mlp_forward(&mut tape, &params, "net", &dims, x).unwrap();
    let expect = mlp_oracle(&rows, &params, "net", &dims);
    let got = tape.value(y);
    assert_eq!(got.shape(), &[5, 32]);
    for (r, row) in expect.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((got.get(&[r, c]) - v).abs() < 1e-6);
        }
    }
}

#[test]
fn mlp_zero_weights_gives_bias_and_single_layer_is_affine() {
    let mut params = ParamSet::<f64>::new();
    params.insert("m.0.weight", Tensor::zeros(&[3, 2])).unwrap();
    params.insert("m.0.bias", t64(&[2], &[0.25, -4.0])).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(t64(&[2, 3], &[1., 2., 3., -7., 0.5, 9.]));
    let y = mlp_forward(&mut tape, &params, "m", &[3, 2], x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25, -4.0, 0.25, -4.0]);

    let mut params = ParamSet::<f64>::new();
    params.insert("m.0.weight", t64(&[2, 1], &[2.0, -1.0])).unwrap();
    params.insert("m.0.bias", t64(&[1], &[0.5])).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(t64(&[1, 2], &[3.0, 4.0]));
    let y = mlp_forward(&mut tape, &params, "m", &[2, 1], x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
}

#[test]
fn mlp_missing_parameter_is_config_error() {
    let params = ParamSet::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        mlp_forward(&mut tape, &params, "absent", &[3, 4], x),
        Err(Error::Config(_))
    ));
}

/// Scatter-accumulate oracle for the transposed convolution.
fn tconv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, s: usize, p: usize, op: usize) -> Tensor<f64> {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, co) = (k.shape()[0], k.shape()[3]);
    let oh = (h - 1) * s + ks + op - 2 * p;
    let ow = (w - 1) * s + ks + op - 2 * p;
    let mut out = vec![0.0; oh * ow * co];
    for i in 0..h {
        for j in 0..w {
            for a in 0..ks {
                for b in 0..ks {
                    let y = (i * s + a) as i64 - p as i64;
                    let z = (j * s + b) as i64 - p as i64;
                    if y < 0 || z < 0 || y >= oh as i64 || z >= ow as i64 {
                        continue;
                    }
                    for c in 0..ci {
                        for o in 0..co {
                            out[(y as usize * ow + z as usize) * co + o] +=
                                x.get(&[i, j, c]) * k.get(&[a, b, c, o]);
                        }
                    }
                }
            }
        }
    }
    t64(&[oh, ow, co], &out)
}

#[test]
fn tconv_shape_and_unit_input() {
    let geom = ConvGeom {
        h: 7,
        w: 7,
        c_in: 1,
        c_out: 1,
        kernel: 5,
        stride: 4,
        pad: 1,
        out_pad: 1,
    };
    assert_eq!(geom.out_dims(), Some((28, 28)));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kernel = random(&[3, 3, 1, 1], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(t64(&[1, 1, 1], &[2.5]));
    let k = tape.leaf(kernel.clone());
    let y = tape.tconv2d(x, k, 2, 0, 0).unwrap();
    assert_eq!(tape.shape(y), &[3, 3, 1]);
    for (got, kv) in tape.value(y).data().iter().zip(kernel.data()) {
        assert_eq!(*got, 2.5 * kv);
    }
}

#[test]
fn tconv_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(h, w, ci, co, k, s, p, op) in &[
        (3, 4, 2, 3, 3, 2, 1, 1),
        (2, 2, 3, 2, 5, 4, 1, 1),
        (4, 3, 1, 2, 3, 1, 1, 0),
        (3, 3, 2, 2, 2, 3, 0, 2),
    ] {
        let x = random(&[h, w, ci], &mut rng);
        let kern = random(&[k, k, ci, co], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.leaf(kern.clone());
        let y = tape.tconv2d(xv, kv, s, p, op).unwrap();
        let expect = tconv_oracle(&x, &kern, s, p, op);
        assert_eq!(tape.shape(y), expect.shape());
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-6);
    }
}

#[test]
fn tconv_rejects_nonpositive_extent() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 1]));
    let k = tape.leaf(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(matches!(tape.tconv2d(x, k, 1, 1, 0), Err(Error::Config(_))));
}

#[test]
fn backward_simple_cases() {
    let mut params = ParamSet::<f64>::new();
    params.insert("x", t64(&[1], &[3.0])).unwrap();
    params.insert("unused", t64(&[2], &[1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&params, "x").unwrap();
    let _ = tape.param(&params, "unused").unwrap();
    let sq = tape.square(x);
    let loss = tape.sum_all(sq);
    tape.backward_into(loss, &mut params).unwrap();
    assert_eq!(params.get("x").unwrap().grad().unwrap(), &[6.0]);
    assert_eq!(params.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradcheck_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamSet::new();
    params.insert("x", random(&[1, 4], &mut rng)).unwrap();
    let a = random(&[4, 4], &mut rng);
    let f = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
        let x = tape.param(p, "x")?;
        let av = tape.leaf(a.clone());
        let ax = tape.matmul(x, av)?;
        let prod = tape.mul(ax, x)?;
        Ok(tape.sum_all(prod))
    };
    let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

fn softmax_ce_toy() -> (ParamSet<f64>, impl Fn(&mut Tape<f64>, &ParamSet<f64>) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::new();
    init_mlp(&mut params, "clf", &[5, 3], &mut rng).unwrap();
    let x = random(&[6, 5], &mut rng);
    let labels = vec![0, 2, 1, 1, 0, 2];
    let f = move |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
        let xv = tape.leaf(x.clone());
        let logits = mlp_forward(tape, p, "clf", &[5, 3], xv)?;
        tape.cross_entropy(logits, &labels)
    };
    (params, f)
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let (params, f) = softmax_ce_toy();
    let report = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn gradcheck_flags_corrupted_gradient() {
    let (params, f) = softmax_ce_toy();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &params).unwrap();
    let mut grads = tape.backward(loss).unwrap().into_params();
    grads.get_mut("clf.0.bias").unwrap()[1] += 0.3;
    let report = compare_gradients(&grads, f, &params, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_err > 1e-2);
    let worst = report.worst.unwrap();
    assert_eq!(worst.param, "clf.0.bias");
    assert_eq!(worst.index, 1);
}

/// Reduces `v` to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, v: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(v), &mut rng);
    let wv = tape.leaf(w);
    let prod = tape.mul(v, wv)?;
    Ok(tape.sum_all(prod))
}

/// Values bounded away from zero so rectifier kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + v.abs());
    }
    t
}

fn check_op(params: ParamSet<f64>, f: impl Fn(&mut Tape<f64>, &ParamSet<f64>) -> crate::Result<Var>) {
    let wrapped = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
        let out = f(tape, p)?;
        probe(tape, out, 99)
    };
    let report = grad_check(wrapped, &params, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn every_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut p = ParamSet::new();
    p.insert("a", away_from_zero(&[3, 4], &mut rng)).unwrap();
    p.insert("b", away_from_zero(&[3, 4], &mut rng)).unwrap();
    p.insert("m", random(&[4, 2], &mut rng)).unwrap();
    p.insert("bias", random(&[4], &mut rng)).unwrap();
    p.insert("row", random(&[1, 4], &mut rng)).unwrap();

    type Case = fn(&mut Tape<f64>, &ParamSet<f64>) -> crate::Result<Var>;
    let cases: Vec<(&str, Case)> = vec![
        ("matmul", |t, p| {
            let (a, m) = (t.param(p, "a")?, t.param(p, "m")?);
            t.matmul(a, m)
        }),
        ("transpose", |t, p| {
            let a = t.param(p, "a")?;
            t.transpose(a)
        }),
        ("add", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            t.add(a, b)
        }),
        ("sub", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            t.sub(a, b)
        }),
        ("mul", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            t.mul(a, b)
        }),
        ("scale", |t, p| {
            let a = t.param(p, "a")?;
            Ok(t.scale(a, -1.7))
        }),
        ("add_bias", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "bias")?);
            t.add_bias(a, b)
        }),
        ("relu", |t, p| {
            let a = t.param(p, "a")?;
            Ok(t.relu(a))
        }),
        ("clamp", |t, p| {
            let a = t.param(p, "a")?;
            Ok(t.clamp(a, -0.1, 0.1))
        }),
        ("square", |t, p| {
            let a = t.param(p, "a")?;
            Ok(t.square(a))
        }),
        ("softmax", |t, p| {
            let a = t.param(p, "a")?;
            t.softmax_rows(a)
        }),
        ("layer_norm", |t, p| {
            let (a, g, s) = (t.param(p, "a")?, t.param(p, "bias")?, t.param(p, "bias")?);
            t.layer_norm(a, g, s)
        }),
        ("sum", |t, p| {
            let a = t.param(p, "a")?;
            let s = t.sum_all(a);
            Ok(t.square(s))
        }),
        ("mean", |t, p| {
            let a = t.param(p, "a")?;
            let s = t.mean_all(a);
            Ok(t.square(s))
        }),
        ("concat_cols", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            t.concat_cols(a, b)
        }),
        ("concat_rows", |t, p| {
            let (a, r) = (t.param(p, "a")?, t.param(p, "row")?);
            t.concat_rows(a, r)
        }),
        ("slice_cols", |t, p| {
            let a = t.param(p, "a")?;
            t.slice_cols(a, 1, 2)
        }),
        ("group_max", |t, p| {
            let a = t.param(p, "a")?;
            t.group_max(a, &[vec![0, 1], vec![2], vec![2, 0, 1]])
        }),
        ("group_mean", |t, p| {
            let a = t.param(p, "a")?;
            t.group_mean(a, &[vec![0, 1], vec![2], vec![1, 1, 2]])
        }),
        ("reshape", |t, p| {
            let a = t.param(p, "a")?;
            let r = t.reshape(a, vec![2, 6])?;
            Ok(t.square(r))
        }),
        ("cross_entropy", |t, p| {
            let a = t.param(p, "a")?;
            t.cross_entropy(a, &[3, 0, 1])
        }),
    ];
    for (name, case) in cases {
        let wrapped = move |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
            let out = case(tape, p)?;
            probe(tape, out, 99)
        };
        let report = grad_check(wrapped, &p, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-5, "{name}: {report:?}");
    }

    let mut conv = ParamSet::new();
    conv.insert("x", random(&[3, 2, 2], &mut rng)).unwrap();
    conv.insert("k", random(&[3, 3, 2, 3], &mut rng)).unwrap();
    check_op(conv, |t, p| {
        let (x, k) = (t.param(p, "x")?, t.param(p, "k")?);
        t.tconv2d(x, k, 2, 1, 1)
    });
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::<f32>::new();
        init_mlp(&mut params, "m", &[6, 12, 4], &mut rng).unwrap();
        let x: Tensor<f32> = uniform_tensor(&[9, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = mlp_forward(&mut tape, &params, "m", &[6, 12, 4], xv).unwrap();
        let s = tape.softmax_rows(y).unwrap();
        tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn tconv_output_shape_formula_exhaustive() {
    for h in 1..6 {
        for k in 1..6 {
            for s in 1..5 {
                for p in 0..3 {
                    for op in 0..3 {
                        let geom = ConvGeom {
                            h,
                            w: h + 1,
                            c_in: 1,
                            c_out: 1,
                            kernel: k,
                            stride: s,
                            pad: p,
                            out_pad: op,
                        };
                        let expect = |n: usize| (n as i64 - 1) * s as i64 - 2 * p as i64 + k as i64 + op as i64;
                        let mut tape = Tape::<f64>::new();
                        let x = tape.leaf(Tensor::full(&[h, h + 1, 1], 1.0));
                        let kv = tape.leaf(Tensor::full(&[k, k, 1, 1], 1.0));
                        match tape.tconv2d(x, kv, s, p, op) {
                            Ok(y) => {
                                assert_eq!(tape.shape(y), &[expect(h) as usize, expect(h + 1) as usize, 1]);
                                assert_eq!(geom.out_dims().unwrap().0 as i64, expect(h));
                            }
                            Err(_) => assert!(expect(h) <= 0 || expect(h + 1) <= 0),
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..12), 1..6)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(width) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let rows32: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_rows(&rows32).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(width) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn kink_crossings_are_detected_and_skipped() {
    let mut params = ParamSet::new();
    params.insert("w", t64(&[3], &[0.0, 0.5, -0.5])).unwrap();
    let f = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
        let w = tape.param(p, "w")?;
        let r = tape.relu(w);
        Ok(tape.sum_all(r))
    };
    // the element sitting on the kink gets analytic 0 but numeric 0.5
    let plain = grad_check(f, &params, &GradCheckConfig::default()).unwrap();
    assert_eq!(plain.worst_param(), Some("w"));
    assert!(plain.max_rel_err > 0.9);
    assert_eq!(plain.skipped, 0);

    let cfg = GradCheckConfig {
        skip_kinks: true,
        ..GradCheckConfig::default()
    };
    let aware = grad_check(f, &params, &cfg).unwrap();
    assert_eq!((aware.checked, aware.skipped), (2, 1));
    assert!(aware.max_rel_err < 1e-9);
}

#[test]
fn branch_signature_tracks_piecewise_choices() {
    let sig = |v: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[v.len()], v));
        let r = tape.relu(x);
        let c = tape.clamp(r, 0.0, 1.0);
        let m = tape.reshape(c, vec![v.len(), 1]).unwrap();
        tape.group_max(m, &[(0..v.len()).collect()]).unwrap();
        tape.branch_signature()
    };
    assert_eq!(sig(&[0.2, 0.3, -1.0]), sig(&[0.25, 0.35, -2.0]));
    assert_ne!(sig(&[0.2, 0.3, -1.0]), sig(&[0.2, 0.3, 1e-3]));
    assert_ne!(sig(&[0.2, 0.3, 0.5]), sig(&[0.2, 0.3, 1.5]));
    assert_ne!(sig(&[0.2, 0.3, 0.1]), sig(&[0.4, 0.3, 0.1]));
}
