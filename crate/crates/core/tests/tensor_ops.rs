//! Op-level checks against independent oracles: direct-loop convolution,
//! adjoint identities, brute-force pooling, closed-form softmax and
//! central-difference gradients.

use lconet::tensor::{grad_check, Tape, Tensor, Var, GRAD_CHECK_TOL, GRAD_CHECK_TOL_POINTWISE};
use lconet::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sextuple-loop convolution with explicit zero padding.
fn direct_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (xo * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += x.data()[((bi * c + ci) * h + yy as usize) * w + xx as usize]
                                    * k.data()[((oi * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).unwrap()
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    let y = t.conv2d(xv, kv, stride, pad).unwrap();
    t.value(y).clone()
}

fn conv_t(y: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize, out_pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let yv = t.constant(y.clone());
    let kv = t.constant(k.clone());
    let x = t.conv_transpose2d(yv, kv, stride, pad, out_pad).unwrap();
    t.value(x).clone()
}

#[test]
fn conv_of_ones_is_nine() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0);
    let k = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&x, &k, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_of_zero_input_is_zero() {
    let mut r = rng(1);
    let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let y = conv(&Tensor::zeros(&[1, 2, 5, 5]), &k, 1, 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_loop() {
    let mut r = rng(2);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let diff = conv(&x, &k, stride, pad).max_abs_diff(&direct_conv(&x, &k, stride, pad));
        assert!(diff < 1e-10, "stride {stride} pad {pad}: {diff}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = t.conv2d(x, k, 1, 1).unwrap_err().to_string();
    assert!(err.contains("axis 1"), "{err}");
}

#[test]
fn conv_transpose_output_size() {
    let y = conv_t(&Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::full(&[1, 1, 2, 2], 1.0), 2, 0, 0);
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 1.0));
    // 3x3 stride-2 upsampling used by the decoder doubles exactly.
    let y = conv_t(&Tensor::zeros(&[1, 2, 8, 8]), &Tensor::full(&[2, 3, 3, 3], 1.0), 2, 1, 1);
    assert_eq!(y.shape(), &[1, 3, 16, 16]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(3);
    for (stride, pad, size) in [(1, 1, 7), (2, 1, 8), (2, 0, 9), (1, 0, 6)] {
        let x = Tensor::randn(&[2, 3, size, size], 1.0, &mut r);
        let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let cx = conv(&x, &k, stride, pad);
        let y = Tensor::randn(cx.shape(), 1.0, &mut r);
        // recover the rows a strided conv skipped at the far edge
        let out_pad = (size + 2 * pad - 3) % stride;
        let ty = conv_t(&y, &k, stride, pad, out_pad);
        assert_eq!(ty.shape(), x.shape());
        let lhs = cx.dot(&y);
        let rhs = x.dot(&ty);
        assert!((lhs - rhs).abs() < 1e-8, "stride {stride}: {lhs} vs {rhs}");
    }
}

#[test]
fn max_pool_basic_and_ties() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.max_pool2d(x, 2).unwrap();
    assert_eq!(t.value(y).item(), 4.0);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::full(&[1, 1, 4, 4], 5.0));
    let y = t.max_pool2d(x, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 5.0));
    let s = t.sum(y);
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    // first element of every window gets the gradient
    let expect: Vec<f64> = (0..16)
        .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(g, expect.as_slice());
}

#[test]
fn max_pool_matches_window_oracle() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = t.max_pool2d(xv, 2).unwrap();
    let d = x.data();
    for oy in 0..2 {
        for ox in 0..2 {
            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(i, j)| d[(2 * oy + i) * 4 + 2 * ox + j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(t.value(y).data()[oy * 2 + ox], m);
        }
    }
}

#[test]
fn max_pool_rejects_odd_dims() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 1, 5, 4]));
    assert!(t.max_pool2d(x, 2).is_err());
}

#[test]
fn relu_and_add_identities() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = t.constant(Tensor::zeros(&[3]));
    let s = t.add(x, z).unwrap();
    assert_eq!(t.value(s).data(), t.value(x).data());
    let bad = t.constant(Tensor::zeros(&[2]));
    assert!(t.add(x, bad).is_err());
}

#[test]
fn scale_shift_output_statistics() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn(&[4, 3, 6, 6], 10.0, &mut r);
    let gamma = [0.5, 2.0, 1.5];
    let beta = [-1.0, 0.25, 3.0];
    let mut t = Tape::new();
    let xv = t.constant(x);
    let g = t.constant(Tensor::new(vec![3], gamma.to_vec()).unwrap());
    let b = t.constant(Tensor::new(vec![3], beta.to_vec()).unwrap());
    let (y, stats) = t.scale_shift(xv, g, b, None, lconet::tensor::NORM_EPS).unwrap();
    assert!(stats.is_some());
    let y = t.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|bi| y.data()[(bi * 3 + c) * 36..(bi * 3 + c + 1) * 36].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - beta[c]).abs() < 1e-6, "mean {mean}");
        assert!((std - gamma[c]).abs() < 1e-6, "std {std}");
    }
}

#[test]
fn softmax_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[1, 4, 2, 2], 0.3));
    let p = t.softmax_channels(x).unwrap();
    assert!(t.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = t.constant(Tensor::new(vec![1, 2, 1, 1], vec![1000.0, 0.0]).unwrap());
    let p = t.softmax_channels(x).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 0.0]);

    let mut r = rng(6);
    let logits = Tensor::<f64>::randn(&[2, 4, 3, 3], 2.0, &mut r);
    let x = t.constant(logits.clone());
    let p = t.softmax_channels(x).unwrap();
    let pv = t.value(p);
    for b in 0..2 {
        for px in 0..9 {
            let e: Vec<f64> = (0..4).map(|l| logits.data()[(b * 4 + l) * 9 + px].exp()).collect();
            let s: f64 = e.iter().sum();
            for l in 0..4 {
                assert!((pv.data()[(b * 4 + l) * 9 + px] - e[l] / s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_rejects_single_class() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(t.softmax_channels(x).is_err());
}

/// Random projection so gradients are not all ones.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let m = t.mask_mul(y, w.into_data())?;
    Ok(t.sum(m))
}

const H: f64 = 1e-6;

#[test]
fn relu_sum_gradient_in_linear_region() {
    let x = Tensor::from_fn(&[2, 3, 4, 4], |i| 0.5 + i as f64 * 0.01);
    let err = grad_check(
        |t, x| {
            let y = t.relu(x);
            Ok(t.sum(y))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn pointwise_gradients() {
    let mut r = rng(7);
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let other = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let gamma = Tensor::randn(&[3], 1.0, &mut r);
    let beta = Tensor::randn(&[3], 1.0, &mut r);
    let checks: Vec<(&str, f64)> = vec![
        (
            "relu",
            grad_check(|t, x| { let y = t.relu(x); project(t, y, 11) }, &x, H).unwrap(),
        ),
        (
            "add",
            grad_check(
                |t, x| {
                    let o = t.constant(other.clone());
                    let y = t.add(x, o)?;
                    project(t, y, 12)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "scale_shift eval",
            grad_check(
                |t, x| {
                    let g = t.constant(gamma.clone());
                    let b = t.constant(beta.clone());
                    let (y, _) = t.scale_shift(x, g, b, Some((&[0.1, -0.2, 0.3], &[1.0, 2.0, 0.5])), 1e-5)?;
                    project(t, y, 13)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "bias_add",
            grad_check(
                |t, x| {
                    let b = t.constant(beta.clone());
                    let y = t.bias_add(x, b)?;
                    project(t, y, 14)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "concat",
            grad_check(
                |t, x| {
                    let o = t.constant(other.clone());
                    let y = t.concat_channels(&[o, x, o])?;
                    project(t, y, 15)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "gather",
            grad_check(
                |t, x| {
                    let y = t.gather_channels(x, &[2, 0, 2])?;
                    project(t, y, 16)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
    ];
    for (name, err) in checks {
        assert!(err < GRAD_CHECK_TOL_POINTWISE, "{name}: {err}");
    }
}

#[test]
fn structured_op_gradients() {
    let mut r = rng(8);
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
    let k = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
    let kt = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let gamma = Tensor::randn(&[3], 1.0, &mut r);
    let beta = Tensor::randn(&[3], 1.0, &mut r);
    let checks: Vec<(&str, f64)> = vec![
        (
            "conv2d input",
            grad_check(
                |t, x| {
                    let kv = t.constant(k.clone());
                    let y = t.conv2d(x, kv, 1, 1)?;
                    project(t, y, 21)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "conv2d kernel",
            grad_check(
                |t, kv| {
                    let xv = t.constant(x.clone());
                    let y = t.conv2d(xv, kv, 2, 1)?;
                    project(t, y, 22)
                },
                &k,
                H,
            )
            .unwrap(),
        ),
        (
            "conv_transpose input",
            grad_check(
                |t, x| {
                    let kv = t.constant(kt.clone());
                    let y = t.conv_transpose2d(x, kv, 2, 1, 1)?;
                    project(t, y, 23)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "conv_transpose kernel",
            grad_check(
                |t, kv| {
                    let xv = t.constant(x.clone());
                    let y = t.conv_transpose2d(xv, kv, 2, 1, 1)?;
                    project(t, y, 24)
                },
                &kt,
                H,
            )
            .unwrap(),
        ),
        (
            "max_pool",
            grad_check(|t, x| { let y = t.max_pool2d(x, 2)?; project(t, y, 25) }, &x, H).unwrap(),
        ),
        (
            "scale_shift batch stats",
            grad_check(
                |t, x| {
                    let g = t.constant(gamma.clone());
                    let b = t.constant(beta.clone());
                    let (y, _) = t.scale_shift(x, g, b, None, 1e-5)?;
                    project(t, y, 26)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "scale_shift gamma",
            grad_check(
                |t, g| {
                    let xv = t.constant(x.clone());
                    let b = t.constant(beta.clone());
                    let (y, _) = t.scale_shift(xv, g, b, None, 1e-5)?;
                    project(t, y, 27)
                },
                &gamma,
                H,
            )
            .unwrap(),
        ),
        (
            "softmax",
            grad_check(
                |t, x| {
                    let y = t.softmax_channels(x)?;
                    project(t, y, 28)
                },
                &x,
                H,
            )
            .unwrap(),
        ),
        (
            "group_lasso",
            grad_check(|t, w| t.group_lasso(w, 2), &k, H).unwrap(),
        ),
    ];
    for (name, err) in checks {
        assert!(err < GRAD_CHECK_TOL, "{name}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_oracle_on_random_shapes(
        b in 1usize..=4, c in 1usize..=8, h in 3usize..=16, w in 3usize..=16,
        o in 1usize..=4, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut r = rng(seed);
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut r);
        let kern = Tensor::randn(&[o, c, k, k], 1.0, &mut r);
        let diff = conv(&x, &kern, stride, pad).max_abs_diff(&direct_conv(&x, &kern, stride, pad));
        prop_assert!(diff < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let logits = Tensor::<f64>::randn(&[2, 4, 3, 3], scale, &mut rng(seed));
        let mut t = Tape::new();
        let x = t.constant(logits);
        let p = t.softmax_channels(x).unwrap();
        let pv = t.value(p).data();
        for b in 0..2 {
            for px in 0..9 {
                let s: f64 = (0..4).map(|l| pv[(b * 4 + l) * 9 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(pv.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn adjoint_identity_holds(seed in any::<u64>(), stride in 1usize..=2, size in 4usize..=10) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[1, 2, size, size], 1.0, &mut r);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let cx = conv(&x, &k, stride, 1);
        let y = Tensor::randn(cx.shape(), 1.0, &mut r);
        let out_pad = (size + 2 - 3) % stride;
        let ty = conv_t(&y, &k, stride, 1, out_pad);
        prop_assert!((cx.dot(&y) - x.dot(&ty)).abs() < 1e-8);
    }
}
