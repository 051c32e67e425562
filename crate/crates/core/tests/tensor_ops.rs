//! Tensor ops against independent loop oracles and finite differences.

use cuboidnet::cli::gradient_suite;
use cuboidnet::tensor::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, &d) in idx.iter().zip(t.shape()) {
        flat = flat * d + i;
    }
    t.data()[flat]
}

/// Six nested loops, zero padding.
fn loop_conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += at(x, &[ci, iy as usize, ix as usize]) * at(k, &[o, ci, dy, dx]);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    (vec![co, oh, ow], out)
}

fn loop_conv3d(x: &Tensor, k: &Tensor, pad: usize) -> Vec<f64> {
    let s = x.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (co, kd, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3], k.shape()[4]);
    let (od, oh, ow) = (d + 2 * pad - kd + 1, h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = Vec::new();
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dz in 0..kd {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let (iz, iy, ix) = (
                                        (z + dz) as isize - pad as isize,
                                        (y + dy) as isize - pad as isize,
                                        (xx + dx) as isize - pad as isize,
                                    );
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += at(x, &[ci, iz as usize, iy as usize, ix as usize]) * at(k, &[o, ci, dz, dy, dx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut r = rng(1);
    for (shape, kshape, stride, pad) in [
        ([1, 5, 5], [2, 1, 3, 3], 1, 0),
        ([1, 5, 5], [2, 1, 3, 3], 1, 1),
        ([3, 5, 4], [1, 3, 3, 3], 1, 1),
        ([2, 5, 5], [4, 2, 3, 3], 2, 1),
        ([2, 4, 5], [3, 2, 1, 1], 1, 0),
    ] {
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let k = Tensor::randn(&kshape, 1.0, &mut r);
        let tape = Tape::inference();
        let y = tape.conv2d(&tape.constant(x.clone()), &tape.constant(k.clone()), None, stride, pad).unwrap();
        let (s, expect) = loop_conv2d(&x, &k, stride, pad);
        assert_eq!(y.shape(), &s[..]);
        assert!(max_diff(y.data(), &expect) <= 1e-12);
    }
}

#[test]
fn conv3d_matches_loop_oracle() {
    let mut r = rng(2);
    for (cin, cout) in [(1, 2), (2, 1), (2, 3)] {
        let x = Tensor::randn(&[cin, 3, 4, 4], 1.0, &mut r);
        let k = Tensor::randn(&[cout, cin, 3, 3, 3], 1.0, &mut r);
        let tape = Tape::inference();
        let y = tape.conv3d(&tape.constant(x.clone()), &tape.constant(k.clone()), None, [1; 3], [1; 3]).unwrap();
        assert_eq!(y.shape(), &[cout, 3, 4, 4]);
        assert!(max_diff(y.data(), &loop_conv3d(&x, &k, 1)) <= 1e-12);
    }
}

#[test]
fn unit_kernels_are_identity() {
    let x = Tensor::randn(&[1, 4, 6], 1.0, &mut rng(3));
    let tape = Tape::inference();
    let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(&tape.constant(x.clone()), &k, Some(&b), 1, 0).unwrap();
    assert_eq!(y.data(), x.data());

    let x3 = Tensor::randn(&[1, 3, 4, 5], 1.0, &mut rng(4));
    let k3 = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y3 = tape.conv3d(&tape.constant(x3.clone()), &k3, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(y3.data(), x3.data());
}

#[test]
fn constant_image_tap_counts() {
    let c = 1.75;
    let tape = Tape::inference();
    let y = tape
        .conv2d(
            &tape.constant(Tensor::full(&[1, 5, 6], c)),
            &tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)),
            None,
            1,
            1,
        )
        .unwrap();
    let v = y.value();
    assert_eq!(at(v, &[0, 2, 2]), 9.0 * c);
    assert_eq!(at(v, &[0, 0, 0]), 4.0 * c);
    assert_eq!(at(v, &[0, 4, 5]), 4.0 * c);
    assert_eq!(at(v, &[0, 0, 3]), 6.0 * c);

    let y3 = tape
        .conv3d(
            &tape.constant(Tensor::full(&[1, 4, 4, 4], c)),
            &tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0)),
            None,
            [1; 3],
            [1; 3],
        )
        .unwrap();
    assert_eq!(at(y3.value(), &[0, 1, 2, 1]), 27.0 * c);
    assert_eq!(at(y3.value(), &[0, 0, 0, 0]), 8.0 * c);
}

#[test]
fn transposed_conv_axis_arithmetic() {
    let tape = Tape::inference();
    for n in [2, 4, 7] {
        let x = tape.constant(Tensor::full(&[1, n, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 1, 1], 1.0));
        let y = tape.conv_transpose3d(&x, &k, None, [2, 1, 1], [1, 0, 0], [2 * n - 1, 3, 3]).unwrap();
        assert_eq!(y.shape(), &[1, (n - 1) * 2 - 2 + 3, 3, 3]);
    }
    for l in [3, 16] {
        let x = tape.constant(Tensor::full(&[1, 2, l, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 8, 1], 1.0));
        let y = tape.conv_transpose3d(&x, &k, None, [1, 4, 1], [0, 2, 0], [2, 4 * l, 3]).unwrap();
        assert_eq!(y.shape(), &[1, 2, (l - 1) * 4 - 4 + 8, 3]);
    }
}

fn adjoint_gap(seed: u64, cin: usize, cout: usize, stride: [usize; 3], k: [usize; 3], pad: [usize; 3], dims: [usize; 3]) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::randn(&[cin, dims[0], dims[1], dims[2]], 1.0, &mut r);
    let kern = Tensor::randn(&[cout, cin, k[0], k[1], k[2]], 1.0, &mut r);
    let tape = Tape::inference();
    let kv = tape.constant(kern);
    let y = tape.conv3d(&tape.constant(x.clone()), &kv, None, stride, pad).unwrap();
    let probe = Tensor::randn(y.shape(), 1.0, &mut r);
    let back = tape.conv_transpose3d(&tape.constant(probe.clone()), &kv, None, stride, pad, dims).unwrap();
    let lhs = dot(y.data(), probe.data());
    let rhs = dot(x.data(), back.data());
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    assert!(adjoint_gap(5, 2, 3, [1; 3], [3; 3], [1; 3], [3, 4, 4]) <= 1e-10);
    assert!(adjoint_gap(6, 1, 2, [2, 1, 1], [3, 1, 1], [1, 0, 0], [7, 3, 2]) <= 1e-10);
    assert!(adjoint_gap(7, 2, 2, [1, 4, 1], [1, 8, 1], [0, 2, 0], [2, 12, 2]) <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn adjointness_random_geometry(seed in 0u64..1000, cin in 1usize..3, cout in 1usize..3, s in 1usize..3, d in 3usize..6, h in 2usize..5) {
        // Extents chosen so every stride divides exactly.
        let d = (d - 1) / s * s + 1;
        prop_assert!(adjoint_gap(seed, cin, cout, [s, 1, 1], [3, 1, 3], [1, 0, 1], [d, h, 3]) <= 1e-10);
    }
}

#[test]
fn broadcast_multiply_matches_loops() {
    let mut r = rng(8);
    let f = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let att = Tensor::uniform(&[3, 1, 1], 0.0, 1.0, &mut r);
    let sp = Tensor::uniform(&[1, 4, 5], 0.0, 1.0, &mut r);
    let tape = Tape::inference();
    let a = tape.mul(&tape.constant(f.clone()), &tape.constant(att.clone())).unwrap();
    let b = tape.mul(&tape.constant(sp.clone()), &tape.constant(f.clone())).unwrap();
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(at(a.value(), &[c, y, x]), at(&f, &[c, y, x]) * at(&att, &[c, 0, 0]));
                assert_eq!(at(b.value(), &[c, y, x]), at(&f, &[c, y, x]) * at(&sp, &[0, y, x]));
            }
        }
    }
}

/// Keys cubic, written out independently of the library.
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

#[test]
fn ramp_upsample_matches_kernel_sum() {
    let n = 9;
    let ramp: Vec<f64> = (0..n).map(|i| 3.0 + 2.5 * i as f64).collect();
    let t = Tensor::new(&[1, n], ramp.clone()).unwrap();
    let up = resample_axis(&t, 1, 4 * n, Alignment::HalfPixel).unwrap();
    for j in 0..4 * n {
        let src = (j as f64 + 0.5) / 4.0 - 0.5;
        let base = src.floor() as isize;
        let mut expect = 0.0;
        for i in base - 1..=base + 2 {
            let clamped = i.clamp(0, n as isize - 1) as usize;
            expect += keys(src - i as f64) * ramp[clamped];
        }
        assert!((up.data()[j] - expect).abs() <= 1e-12, "site {j}: {} vs {expect}", up.data()[j]);
    }
    // Away from the clamped borders a ramp is reproduced exactly.
    for j in 8..4 * n - 8 {
        let src = (j as f64 + 0.5) / 4.0 - 0.5;
        assert!((up.data()[j] - (3.0 + 2.5 * src)).abs() <= 1e-12);
    }
}

#[test]
fn gradient_suite_ten_seeds() {
    let start = std::time::Instant::now();
    let results = gradient_suite(0..10, 1e-6);
    for r in &results {
        assert!(r.passed(), "{}", r.line());
    }
    assert!(results.len() >= 25);
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn composed_conv_relu_sum_matches_finite_differences() {
    let mut r = rng(9);
    let k = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut r);
    let x = Tensor::randn(&[1, 5, 5], 1.0, &mut r);
    let f = |tape: &Tape, v: &Var| {
        let y = tape.conv2d(v, &tape.constant(k.clone()), None, 1, 1)?;
        tape.sum(&tape.relu(&y)?)
    };
    // Keep the pre-activations away from the kink.
    let tape = Tape::inference();
    let pre = tape.conv2d(&tape.constant(x.clone()), &tape.constant(k.clone()), None, 1, 1).unwrap();
    assert!(pre.data().iter().all(|v| v.abs() > 1e-3));
    assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-6);
}

#[test]
fn max_gradient_routes_to_argmax() {
    let mut x = Tensor::zeros(&[2, 3, 3]);
    x.data_mut()[4] = 5.0;
    x.data_mut()[9 + 7] = -1.0;
    let x = x.with_requires_grad(true);
    let tape = Tape::new();
    let v = tape.leaf(x);
    let (_, m) = tape.pool_channel_stats(&v).unwrap();
    let g = tape.backward(&tape.sum(&m).unwrap()).unwrap();
    let g = g.get(&v).unwrap();
    let mut expect = [0.0; 18];
    expect[4] = 1.0;
    // Second channel: all zeros except one -1; first zero wins.
    expect[9] = 1.0;
    assert_eq!(g, &expect[..]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut r = rng(10);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[2, 5, 5], 1.0, &mut r).with_requires_grad(true));
        let k = tape.leaf(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r).with_requires_grad(true));
        let y = tape.sigmoid(&tape.conv2d(&x, &k, None, 1, 1).unwrap()).unwrap();
        let (a, m) = tape.pool_channel_stats(&y).unwrap();
        let loss = tape.sum(&tape.mul(&y, &tape.add(&a, &m).unwrap()).unwrap()).unwrap();
        let g = tape.backward(&loss).unwrap();
        (g.get(&x).unwrap().to_vec(), g.get(&k).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
