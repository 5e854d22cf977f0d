use mvad::gradcheck::{grad_check, grad_check_multi, DEFAULT_STEP};
use mvad::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
        }
    }
    // batched, per-batch weights
    let a = randn(&[2, 3, 4], 3);
    let b = randn(&[2, 4, 5], 4);
    let c = a.matmul(&b).unwrap();
    for bi in 0..2 {
        let single = a.slice(0, bi, 1).unwrap().into_reshape(vec![3, 4]).unwrap();
        let bs = b.slice(0, bi, 1).unwrap().into_reshape(vec![4, 5]).unwrap();
        let want = single.matmul(&bs).unwrap();
        let got = c.slice(0, bi, 1).unwrap().into_reshape(vec![3, 5]).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let x = randn(&[7], 5).map(|v| v * 3.0);
    let y = x.softmax(0).unwrap();
    let total: f64 = x.data().iter().map(|v| v.exp()).sum();
    for (yi, xi) in y.data().iter().zip(x.data()) {
        assert!((yi - xi.exp() / total).abs() < 1e-12);
    }
    // non-last dim
    let m = randn(&[3, 4], 6);
    let s = m.softmax(0).unwrap();
    for col in 0..4 {
        let total: f64 = (0..3).map(|r| s.data()[r * 4 + col]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_statistics() {
    let x = randn(&[1, 32], 7).map(|v| v * 5.0 + 2.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let g = tape.constant(Tensor::full(vec![32], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(vec![32])).unwrap();
    let y = tape.layer_norm(xv, 1, g, b).unwrap();
    let d = tape.value(y).data();
    let mean: f64 = d.iter().sum::<f64>() / 32.0;
    let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
    assert!(mean.abs() < 1e-10);
    assert!((1.0 - 1e-3..=1.0).contains(&var), "{var}");
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, co, ho, wo]);
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((bi * co + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    for (stride, pad, h, w) in [(1, 1, 5, 6), (2, 1, 7, 6), (2, 0, 6, 6), (1, 0, 4, 3)] {
        let x = randn(&[2, 3, h, w], 10 + stride as u64);
        let wt = randn(&[4, 3, 3, 3], 20 + pad as u64);
        let b = randn(&[4], 30);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()).unwrap(),
            tape.constant(wt.clone()).unwrap(),
            tape.constant(b.clone()).unwrap(),
        );
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &wt, &b, stride, pad);
        assert_eq!(tape.value(y).shape(), want.shape());
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn mse_matches_scalar_loop() {
    let a = randn(&[2, 3, 4, 5], 40);
    let b = randn(&[2, 3, 4, 5], 41);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let l = tape.mse_loss(av, bv).unwrap();
    let mut s = 0.0;
    for i in 0..a.numel() {
        s += (a.data()[i] - b.data()[i]).powi(2);
    }
    assert!((tape.value(l).item() - s / (2.0 * 20.0)).abs() < 1e-12);
}

const TOL: f64 = 1e-4;

#[test]
fn gradients_of_every_op() {
    for seed in 0..10u64 {
        let s = seed * 100;
        let check = |name: &str, err: f64| assert!(err <= TOL, "{name} seed {seed}: {err}");
        let wsum = |t: &mut Tape<f64>, y: mvad::Var, seed: u64| {
            let r = t.constant(randn(t.shape(y), seed)).unwrap();
            let p = t.mul(y, r)?;
            t.sum(p)
        };
        check(
            "add/sub/mul/scale",
            grad_check_multi(
                |t, v| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.sub(a, v[1])?;
                    let c = t.mul(b, v[1])?;
                    let d = t.scale(c, 0.7)?;
                    wsum(t, d, s + 1)
                },
                &[randn(&[3, 2], s + 2), randn(&[3, 2], s + 3)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "add_broadcast",
            grad_check_multi(
                |t, v| {
                    let y = t.add_broadcast(v[0], v[1])?;
                    wsum(t, y, s + 4)
                },
                &[randn(&[2, 3, 4], s + 5), randn(&[3, 4], s + 6)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "relu",
            grad_check(
                |t, x| {
                    let y = t.relu(x)?;
                    wsum(t, y, s + 7)
                },
                &randn(&[10], s + 8),
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "gelu",
            grad_check(
                |t, x| {
                    let y = t.gelu(x)?;
                    wsum(t, y, s + 9)
                },
                &randn(&[10], s + 10).map(|v| 2.0 * v),
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "matmul batched",
            grad_check_multi(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    wsum(t, y, s + 11)
                },
                &[randn(&[2, 3, 4], s + 12), randn(&[2, 4, 2], s + 13)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "matmul shared",
            grad_check_multi(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    wsum(t, y, s + 14)
                },
                &[randn(&[2, 3, 4], s + 15), randn(&[4, 2], s + 16)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        for dim in 0..2 {
            check(
                "softmax",
                grad_check(
                    |t, x| {
                        let y = t.softmax(x, dim)?;
                        wsum(t, y, s + 17)
                    },
                    &randn(&[3, 4], s + 18),
                    DEFAULT_STEP,
                )
                .unwrap(),
            );
        }
        check(
            "layer_norm",
            grad_check_multi(
                |t, v| {
                    let y = t.layer_norm(v[0], 1, v[1], v[2])?;
                    wsum(t, y, s + 19)
                },
                &[randn(&[3, 5, 2], s + 20), randn(&[5], s + 21), randn(&[5], s + 22)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
            check(
                "conv2d",
                grad_check_multi(
                    |t, v| {
                        let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                        wsum(t, y, s + 23)
                    },
                    &[randn(&[2, 2, 5, 4], s + 24), randn(&[3, 2, 3, 3], s + 25), randn(&[3], s + 26)],
                    DEFAULT_STEP,
                )
                .unwrap(),
            );
        }
        check(
            "mean/sum",
            grad_check(
                |t, x| {
                    let y = t.mean_dim(x, 1)?;
                    wsum(t, y, s + 27)
                },
                &randn(&[3, 4, 2], s + 28),
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "concat/slice/reshape/permute",
            grad_check_multi(
                |t, v| {
                    let c = t.concat(&[v[0], v[1]], 1)?;
                    let sl = t.slice(c, 1, 1, 3)?;
                    let r = t.reshape(sl, &[2, 3, 2])?;
                    let p = t.permute(r, &[2, 0, 1])?;
                    wsum(t, p, s + 29)
                },
                &[randn(&[2, 2, 2], s + 30), randn(&[2, 3, 2], s + 31)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "gather",
            grad_check(
                |t, x| {
                    let y = t.gather(x, 1, &[2, 0, 2, 1])?;
                    wsum(t, y, s + 32)
                },
                &randn(&[2, 3, 2], s + 33),
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "upsample",
            grad_check(
                |t, x| {
                    let y = t.upsample_nearest(x, 2)?;
                    wsum(t, y, s + 34)
                },
                &randn(&[2, 2, 3], s + 35),
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "cosine",
            grad_check_multi(
                |t, v| {
                    let y = t.cosine_similarity(v[0], v[1], 1)?;
                    wsum(t, y, s + 36)
                },
                &[randn(&[2, 4, 3], s + 37), randn(&[2, 4, 3], s + 38)],
                DEFAULT_STEP,
            )
            .unwrap(),
        );
        check(
            "mse",
            grad_check_multi(|t, v| t.mse_loss(v[0], v[1]), &[randn(&[2, 3, 3], s + 39), randn(&[2, 3, 3], s + 40)], DEFAULT_STEP)
                .unwrap(),
        );
        check(
            "mse to zero",
            grad_check(
                |t, x| {
                    let z = t.constant(Tensor::zeros(t.shape(x).to_vec()))?;
                    t.mse_loss(x, z)
                },
                &randn(&[3, 4], s + 41),
                DEFAULT_STEP,
            )
            .unwrap(),
        );
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, 6, 6], 50)).unwrap();
        let w = tape.constant(randn(&[4, 3, 3, 3], 51)).unwrap();
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.gelu(y).unwrap();
        let y = tape.softmax(y, 3).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1000.0f64..1000.0, 1..40)) {
        let n = v.len();
        let y = Tensor::new(vec![n], v).unwrap().softmax(0).unwrap();
        let s: f64 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let x = randn(&[a, b, c], seed);
        let p = x.permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(p.permute(&[2, 0, 1]).unwrap(), x.clone());
        let r = x.reshape(vec![a * b * c]).unwrap().into_reshape(vec![a, b, c]).unwrap();
        prop_assert_eq!(r, x.clone());
        let g = x.gather(0, &(0..a).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(g, x);
    }
}
