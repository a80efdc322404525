mod common;

use proptest::prelude::*;
use rand::Rng;
use runaway_core::tensor::{Tape, Tensor, TensorError, Var};

/// Direct six-loop cross-correlation, written independently of the im2col path.
fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[fi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[ni, fi, oy, ox], acc);
                }
            }
        }
    }
    out
}

fn conv_once(x: Tensor<f32>, w: Tensor<f32>, b: Tensor<f32>, stride: usize, pad: usize) -> Result<Tensor<f32>, TensorError> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x)?, tape.constant(w)?, tape.constant(b)?);
    let y = tape.conv2d(x, w, b, stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv2d_sum_of_ones() {
    let out = conv_once(Tensor::full([1, 1, 3, 3], 1.0), Tensor::full([1, 1, 2, 2], 1.0), Tensor::zeros([1]), 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert_eq!(out.data(), &[4.0; 4]);
}

#[test]
fn conv2d_delta_kernel_crops_top_left() {
    let x = Tensor::from_fn([1, 1, 5, 6], |i| i as f32 * 0.5 - 3.0);
    let mut k = Tensor::zeros([1, 1, 3, 2]);
    k.set(&[0, 0, 0, 0], 1.0);
    let out = conv_once(x.clone(), k, Tensor::zeros([1]), 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 3, 5]);
    for y in 0..3 {
        for xx in 0..5 {
            assert_eq!(out.at(&[0, 0, y, xx]), x.at(&[0, 0, y, xx]));
        }
    }
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = common::rng(11);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1), (1, 0)] {
        let x = common::uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = common::uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = common::uniform(&mut rng, &[3], -1.0, 1.0);
        let expected = naive_conv2d(&x, &w, &b, stride, pad);
        let got = conv_once(x.cast(), w.cast(), b.cast(), stride, pad).unwrap();
        assert_eq!(got.shape(), expected.shape());
        for (g, e) in got.data().iter().zip(expected.data()) {
            assert!((*g as f64 - e).abs() < 1e-5, "stride {stride} pad {pad}: {g} vs {e}");
        }
    }
}

#[test]
fn conv2d_rejects_bad_arguments() {
    let err = conv_once(Tensor::zeros([1, 2, 4, 4]), Tensor::zeros([1, 3, 3, 3]), Tensor::zeros([1]), 1, 0).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }), "{err}");
    let err = conv_once(Tensor::zeros([1, 1, 4, 4]), Tensor::zeros([1, 1, 3, 3]), Tensor::zeros([1]), 0, 0).unwrap_err();
    assert!(matches!(err, TensorError::Argument { .. }), "{err}");
    let err = conv_once(Tensor::zeros([1, 1, 2, 2]), Tensor::zeros([1, 1, 3, 3]), Tensor::zeros([1]), 1, 0).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }), "{err}");
}

fn linear_once(x: Tensor<f32>, w: Tensor<f32>, b: Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x)?, tape.constant(w)?, tape.constant(b)?);
    let y = tape.linear(x, w, b)?;
    Ok(tape.value(y).clone())
}

#[test]
fn linear_examples() {
    let x = Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap();
    let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    assert_eq!(linear_once(x.clone(), eye, Tensor::zeros([3])).unwrap(), x);

    // naive matrix-vector: [1*1 + 1*2, 1*3 + 1*4]
    let w = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = linear_once(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(), w, Tensor::zeros([2])).unwrap();
    assert_eq!(y.data(), &[3.0, 7.0]);

    let y = linear_once(Tensor::zeros([2, 3]), Tensor::zeros([4, 3]), Tensor::zeros([4])).unwrap();
    assert_eq!(y.shape(), &[2, 4]);

    let err = linear_once(Tensor::zeros([2, 3]), Tensor::zeros([4, 2]), Tensor::zeros([4])).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
}

fn unary(values: &[f32], f: impl Fn(&mut Tape<f32>, Var) -> Result<Var, TensorError>) -> Result<Vec<f32>, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([values.len()], values.to_vec()).unwrap())?;
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).data().to_vec())
}

#[test]
fn activation_examples() {
    assert_eq!(unary(&[-1.0, 0.0, 2.0], |t, x| t.relu(x)).unwrap(), vec![0.0, 0.0, 2.0]);
    assert_eq!(unary(&[0.0, 0.0], |t, x| t.softmax(x, 0)).unwrap(), vec![0.5, 0.5]);

    // exp(ln 2) / (exp(ln 2) + 1) evaluated in f64.
    let two = 2f64.ln().exp();
    let (p0, p1) = (two / (two + 1.0), 1.0 / (two + 1.0));
    let got = unary(&[2f32.ln(), 0.0], |t, x| t.softmax(x, 0)).unwrap();
    assert!((got[0] as f64 - p0).abs() < 1e-6 && (got[1] as f64 - p1).abs() < 1e-6);
    assert!((p0 - 2.0 / 3.0).abs() < 1e-12);

    let err = unary(&[1.0], |t, x| t.softmax(x, 1)).unwrap_err();
    assert!(matches!(err, TensorError::Argument { .. }));
}

#[test]
fn max_pool_routes_gradient_to_first_maximum() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).unwrap()).unwrap();
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 1, 2, 2])).unwrap();
    assert!(matches!(tape.max_pool2d(x, 3, 1).unwrap_err(), TensorError::Argument { .. }));
}

fn ce_once(logits: Tensor<f32>, labels: &[usize]) -> Result<f32, TensorError> {
    let mut tape = Tape::new();
    let z = tape.constant(logits)?;
    let l = tape.cross_entropy(z, labels)?;
    Ok(tape.value(l).item())
}

#[test]
fn cross_entropy_examples() {
    let l = ce_once(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!((l as f64 - 2f64.ln()).abs() < 1e-6);

    let l = ce_once(Tensor::new([1, 2], vec![1000.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!(l.is_finite() && l.abs() < 1e-6);

    let mut rng = common::rng(5);
    let logits = common::uniform(&mut rng, &[4, 2], -3.0, 3.0);
    let labels = [0, 1, 1, 0];
    let oracle: f64 = (0..4)
        .map(|r| {
            let (a, b) = (logits.at(&[r, 0]), logits.at(&[r, 1]));
            -(logits.at(&[r, labels[r]]).exp() / (a.exp() + b.exp())).ln()
        })
        .sum::<f64>()
        / 4.0;
    let got = ce_once(logits.cast(), &labels).unwrap();
    assert!((got as f64 - oracle).abs() < 1e-5, "{got} vs {oracle}");
    assert!(got > 0.0);

    let err = ce_once(Tensor::zeros([1, 2]), &[2]).unwrap_err();
    assert!(matches!(err, TensorError::Argument { .. }));
    let err = ce_once(Tensor::zeros([1, 3]), &[0]).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn square_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);
}

#[test]
fn fan_out_accumulates_exactly() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([3], vec![0.3, -1.7, 2.9]).unwrap()).unwrap();
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn relu_of_matvec_matches_finite_differences() {
    let mut rng = common::rng(3);
    let w = common::uniform(&mut rng, &[3, 3], -1.0, 1.0);
    let x = common::uniform(&mut rng, &[3, 1], -1.0, 1.0);
    check_grad!([w, x], 1e-3, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let r = t.relu(y)?;
        t.sum(r)
    })
    .unwrap();
}

#[test]
fn composite_cnn_graph_matches_finite_differences() {
    let mut rng = common::rng(17);
    let x = common::uniform(&mut rng, &[1, 1, 6, 6], -1.0, 1.0);
    let k = common::uniform(&mut rng, &[2, 1, 3, 3], -0.5, 0.5);
    let kb = common::uniform(&mut rng, &[2], -0.1, 0.1);
    let w = common::uniform(&mut rng, &[2, 8], -0.5, 0.5);
    let b = common::uniform(&mut rng, &[2], -0.1, 0.1);
    let numeric = common::numeric_grads(&[x.clone(), k.clone(), kb.clone(), w.clone(), b.clone()], 1e-5, |t, v| {
        let c = t.conv2d(v[0], v[1], v[2], 1, 0)?;
        let r = t.relu(c)?;
        let p = t.max_pool2d(r, 2, 2)?;
        let f = t.flatten(p)?;
        let z = t.linear(f, v[3], v[4])?;
        t.cross_entropy(z, &[1])
    });
    let analytic = common::analytic_grads(&[x, k, kb, w, b], |t, v| {
        let c = t.conv2d(v[0], v[1], v[2], 1, 0)?;
        let r = t.relu(c)?;
        let p = t.max_pool2d(r, 2, 2)?;
        let f = t.flatten(p)?;
        let z = t.linear(f, v[3], v[4])?;
        t.cross_entropy(z, &[1])
    });
    common::compare(&analytic, &numeric, 1e-2, 1e-4).unwrap();
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
    let y = tape.scale(x, 2.0).unwrap();
    assert_eq!(tape.backward(y).unwrap_err(), TensorError::NonScalarLoss(vec![2]));

    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::scalar(1.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.backward(y).unwrap_err(), TensorError::TapeConsumed);
    assert_eq!(tape.relu(x).unwrap_err(), TensorError::TapeConsumed);

    let mut other = Tape::<f32>::new();
    let z = other.param(Tensor::scalar(1.0)).unwrap();
    let mut tape = Tape::<f32>::new();
    assert_eq!(tape.backward(z).unwrap_err(), TensorError::Detached);
}

#[test]
fn non_finite_values_surface_as_errors() {
    let mut tape = Tape::<f32>::new();
    assert!(matches!(tape.param(Tensor::scalar(f32::NAN)), Err(TensorError::NonFinite { .. })));
    let x = tape.param(Tensor::scalar(1e30)).unwrap();
    let y = tape.scale(x, 1e10);
    assert!(matches!(y, Err(TensorError::NonFinite { op: "scale" })));

    // Finite forward, overflowing backward.
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::scalar(1e20)).unwrap();
    let w = tape.param(Tensor::scalar(1e-20)).unwrap();
    let y = tape.mul(x, w).unwrap();
    let z = tape.scale(y, 1e30).unwrap();
    assert!(matches!(tape.backward(z), Err(TensorError::NonFinite { .. })));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = common::rng(99);
        let x: Tensor<f32> = common::uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0).cast();
        let w: Tensor<f32> = common::uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).cast();
        let mut tape = Tape::new();
        let (x, w, b) = (tape.constant(x).unwrap(), tape.param(w).unwrap(), tape.param(Tensor::zeros([4])).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        tape.value(s).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn permute_and_narrow_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f32)).unwrap();
    let p = tape.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(tape.shape(p), &[4, 2, 3]);
    assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
    let n = tape.narrow(x, 1, 1, 2).unwrap();
    assert_eq!(tape.shape(n), &[2, 2, 4]);
    assert_eq!(tape.value(n).at(&[1, 0, 2]), tape.value(x).at(&[1, 1, 2]));
    assert!(tape.permute(x, &[0, 0, 1]).is_err());
    assert!(tape.narrow(x, 1, 2, 2).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-5.0f32..5.0, 2..24), cols in 1usize..4) {
        let rows = values.len() / cols;
        prop_assume!(rows >= 1);
        let data = values[..rows * cols].to_vec();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([rows, cols], data).unwrap()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1 && p == 1.0));
        }
    }
}

/// One finite-difference check per primitive over 20 seeded inputs of at most 64 elements.
mod primitive_gradients {
    use super::*;

    const TRIALS: u64 = 20;
    const H: f64 = 1e-5;

    fn trials(mut f: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<(), String>) {
        for seed in 0..TRIALS {
            let mut rng = common::rng(1000 + seed);
            if let Err(e) = f(&mut rng) {
                panic!("trial {seed}: {e}");
            }
        }
    }

    #[test]
    fn add_sub_mul_scale() {
        trials(|rng| {
            let a = common::uniform(rng, &[3, 4], -1.0, 1.0);
            let b = common::uniform(rng, &[3, 4], -1.0, 1.0);
            check_grad!([a, b], H, |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let d = t.sub(d, v[1])?;
                let m = t.mul(d, v[0])?;
                let k = t.scale(m, 0.7)?;
                common::weighted_sum(t, k)
            })
        });
    }

    #[test]
    fn add_broadcast_and_expand() {
        trials(|rng| {
            let a = common::uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let b = common::uniform(rng, &[3, 4], -1.0, 1.0);
            check_grad!([a, b], H, |t, v| {
                let e = t.expand(v[1], 2)?;
                let s = t.add_broadcast(v[0], v[1])?;
                let s = t.mul(s, e)?;
                common::weighted_sum(t, s)
            })
        });
    }

    #[test]
    fn sum_and_mean() {
        trials(|rng| {
            let a = common::uniform(rng, &[5, 5], -1.0, 1.0);
            check_grad!([a], H, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq)?;
                let m = t.mean(v[0])?;
                let m = t.mul(m, s)?;
                t.add(s, m)
            })
        });
    }

    #[test]
    fn matmul() {
        trials(|rng| {
            let a = common::uniform(rng, &[3, 5], -1.0, 1.0);
            let b = common::uniform(rng, &[5, 4], -1.0, 1.0);
            check_grad!([a, b], H, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn batch_matmul_plain_and_transposed() {
        trials(|rng| {
            let a = common::uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let b = common::uniform(rng, &[2, 4, 5], -1.0, 1.0);
            let c = common::uniform(rng, &[2, 5, 4], -1.0, 1.0);
            check_grad!([a, b, c], H, |t, v| {
                let y = t.batch_matmul(v[0], v[1], false)?;
                let z = t.batch_matmul(v[0], v[2], true)?;
                let y = t.mul(y, z)?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn linear() {
        trials(|rng| {
            let x = common::uniform(rng, &[4, 6], -1.0, 1.0);
            let w = common::uniform(rng, &[3, 6], -1.0, 1.0);
            let b = common::uniform(rng, &[3], -1.0, 1.0);
            check_grad!([x, w, b], H, |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn conv2d() {
        trials(|rng| {
            let (stride, pad) = if rng.random_bool(0.5) { (1, 1) } else { (2, 0) };
            let x = common::uniform(rng, &[2, 2, 4, 4], -1.0, 1.0);
            let w = common::uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = common::uniform(rng, &[2], -1.0, 1.0);
            check_grad!([x, w, b], H, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn relu() {
        trials(|rng| {
            let x = common::away_from_zero(rng, &[64], 0.01);
            check_grad!([x], H, |t, v| {
                let y = t.relu(v[0])?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn gelu() {
        trials(|rng| {
            let x = common::uniform(rng, &[64], -3.0, 3.0);
            check_grad!([x], H, |t, v| {
                let y = t.gelu(v[0])?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn softmax_each_axis() {
        trials(|rng| {
            let x = common::uniform(rng, &[3, 4, 5], -2.0, 2.0);
            let axis = rng.random_range(0..3);
            check_grad!([x], H, |t, v| {
                let y = t.softmax(v[0], axis)?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn max_pool2d() {
        trials(|rng| {
            let x = common::distinct(rng, &[1, 2, 4, 6]);
            let (window, stride) = if rng.random_bool(0.5) { (2, 2) } else { (3, 1) };
            check_grad!([x], H, |t, v| {
                let y = t.max_pool2d(v[0], window, stride)?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn global_avg_pool2d() {
        trials(|rng| {
            let x = common::uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
            check_grad!([x], H, |t, v| {
                let y = t.global_avg_pool2d(v[0])?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn layer_norm() {
        trials(|rng| {
            let x = common::uniform(rng, &[4, 6], -2.0, 2.0);
            let g = common::uniform(rng, &[6], 0.5, 1.5);
            let b = common::uniform(rng, &[6], -0.5, 0.5);
            check_grad!([x, g, b], H, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                common::weighted_sum(t, y)
            })
        });
    }

    #[test]
    fn cross_entropy() {
        trials(|rng| {
            let z = common::uniform(rng, &[6, 2], -3.0, 3.0);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..2)).collect();
            check_grad!([z], H, |t, v| t.cross_entropy(v[0], &labels))
        });
    }

    #[test]
    fn reshape_permute_narrow_concat() {
        trials(|rng| {
            let a = common::uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let b = common::uniform(rng, &[2, 1, 4], -1.0, 1.0);
            check_grad!([a, b], H, |t, v| {
                let c = t.concat(&[v[1], v[0]], 1)?;
                let p = t.permute(c, &[2, 0, 1])?;
                let n = t.narrow(p, 2, 1, 3)?;
                let r = t.reshape(n, &[4, 6])?;
                let r = t.mul(r, r)?;
                common::weighted_sum(t, r)
            })
        });
    }
}
