use cuboidnet::net::*;
use cuboidnet::tensor::*;
use cuboidnet::video::{bicubic_baseline_values, slice, SliceAxis, VideoCuboid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip(n: usize, h: usize, w: usize) -> VideoCuboid {
    VideoCuboid::from_fn(n, h, w, |t, y, x| {
        127.0 + 100.0 * ((0.4 * x as f64 + 0.3 * y as f64 - 0.5 * t as f64).sin())
    })
    .unwrap()
}

fn tiny() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        resdb_count: 1,
        resdb_growth: 2,
        conv3d_count: 1,
        cbam_reduction: 2,
        ..NetworkConfig::toy()
    }
}

/// Replaces every parameter with small random values so no path is inert.
fn randomise(net: &mut CuboidNet, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in net.params.iter_mut() {
        for v in t.data_mut() {
            *v = std * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}

/// Positive biases and weights with a small positive mean: on non-negative
/// inputs no ReLU channel dies, so every parameter sits on a live path.
fn randomise_active(net: &mut CuboidNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in net.params.iter_mut() {
        let bias = name.ends_with(".bias");
        for v in t.data_mut() {
            let u: f64 = rng.random();
            *v = if bias { 0.1 + 0.2 * u } else { 0.03 + 0.1 * (2.0 * u - 1.0) };
        }
    }
}

fn zero_prefix(net: &mut CuboidNet, prefix: &str) {
    for (name, t) in net.params.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn identity_chain_matches_bicubic() {
    let net = CuboidNet::new(NetworkConfig::toy(), 7).unwrap();
    let v = clip(4, 16, 16);
    let tape = Tape::inference();
    let (_, out) = net.forward(&tape, &v).unwrap();
    assert_eq!(out.shape(), &[7, 64, 64]);
    let base = bicubic_baseline_values(&v, 4);
    let worst = out
        .data()
        .iter()
        .zip(&base)
        .map(|(a, b)| (a * 255.0 - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn output_shapes() {
    let net = CuboidNet::new(tiny(), 1).unwrap();
    for (n, h, w) in [(4, 16, 16), (6, 24, 24), (2, 3, 5)] {
        let out = net.super_resolve(&clip(n, h, w)).unwrap();
        assert_eq!(out.dims(), (2 * n - 1, 4 * h, 4 * w));
    }
    assert!(net.super_resolve(&clip(1, 8, 8)).is_err());
}

// ---- ResDB -------------------------------------------------------------

#[test]
fn resdb_with_zero_weights_is_identity() {
    let mut net = CuboidNet::new(NetworkConfig::toy(), 2).unwrap();
    zero_prefix(&mut net, "mbfe.b1.resdb0.");
    let x = Tensor::randn(&[16, 5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    let y = resdb_forward(&tape, &p, "mbfe.b1.resdb0", &tape.constant(x.clone())).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn resdb_preserves_shape() {
    let net = CuboidNet::new(NetworkConfig::toy(), 2).unwrap();
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    for (h, w) in [(3, 3), (4, 9), (7, 5)] {
        let x = tape.constant(Tensor::full(&[16, h, w], 0.3));
        assert_eq!(resdb_forward(&tape, &p, "mbfe.b2.resdb1", &x).unwrap().shape(), &[16, h, w]);
    }
    assert!(resdb_forward(&tape, &p, "mbfe.b2.resdb1", &tape.constant(Tensor::zeros(&[8, 3, 3]))).is_err());
}

fn conv2d_count(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn conv3d_count(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}

fn resdb_count(c: usize, g: usize) -> usize {
    (0..3).map(|i| conv2d_count(g, c + i * g, 3)).sum::<usize>() + conv2d_count(c, 3 * g, 1)
}

#[test]
fn resdb_parameter_count_by_hand() {
    // 8*16*9+8 + 8*24*9+8 + 8*32*9+8 + 16*24+16
    assert_eq!(resdb_count(16, 8), 5608);
    let net = CuboidNet::new(NetworkConfig::toy(), 0).unwrap();
    assert_eq!(net.params.breakdown(3)["mbfe.b1.resdb0"], 5608);
}

/// Independent tally from the layer list.
fn hand_count(cfg: &NetworkConfig) -> usize {
    let (c, r, g, l) = (cfg.base_channels, cfg.resdb_count, cfg.resdb_growth, cfg.conv3d_count);
    let mfb = conv2d_count(c, 1, 3)
        + conv2d_count(c, c, 3)
        + r * resdb_count(c, g)
        + conv2d_count(c, r * c, 1)
        + conv2d_count(c, c, 3)
        + conv2d_count(1, c, 3);
    let rb = |k: usize| conv3d_count(c, 1, 3) + (l - 1) * conv3d_count(c, c, 3) + (c * c * k + c) + conv3d_count(1, c, 3);
    let f = cfg.spatial_factor;
    let fusion = conv3d_count(c, 3, 3) + conv3d_count(1, c, 3);
    let qe = conv2d_count(c, 1, 3) + 2 * conv2d_count(c, c, 3) + 3 * c + conv2d_count(1, c, 3);
    let h = c / cfg.cbam_reduction;
    let k = cfg.cbam_spatial_kernel;
    let cbam = conv2d_count(h, c, 1) + conv2d_count(c, h, 1) + conv2d_count(1, 2, k);
    let cfqe = conv2d_count(c, 3, 3) + 5 * conv2d_count(c, c, 3) + 2 * cbam + conv2d_count(1, c, 3);
    3 * mfb + rb(3) + 2 * rb(2 * f) + fusion + if cfg.enable_qe { qe } else { 0 } + if cfg.enable_cfqe { cfqe } else { 0 }
}

#[test]
fn parameter_count_matches_hand_tally() {
    for cfg in [NetworkConfig::toy(), tiny(), NetworkConfig::paper_vimeo(), NetworkConfig::paper_vid4()] {
        let net = CuboidNet::new(cfg.clone(), 0).unwrap();
        assert_eq!(net.param_count(), hand_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn parameter_count_monotone() {
    let count = |cfg: NetworkConfig| CuboidNet::new(cfg, 0).unwrap().param_count();
    let mut prev = 0;
    for r in 1..6 {
        let n = count(NetworkConfig { resdb_count: r, ..NetworkConfig::toy() });
        assert!(n > prev);
        prev = n;
    }
    let on = count(NetworkConfig::toy());
    let off = count(NetworkConfig { enable_cfqe: false, ..NetworkConfig::toy() });
    assert!(off < on);
}

// ---- MFB / MBFE --------------------------------------------------------

#[test]
fn mfb_with_zero_head_returns_bicubic_slice() {
    let net = CuboidNet::new(NetworkConfig::toy(), 4).unwrap();
    let v = clip(4, 16, 16).map(|x| x / 255.0);
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    for (axis, idx, expect) in [(SliceAxis::Time, 0, [1, 64, 64]), (SliceAxis::Width, 3, [1, 64, 7])] {
        let plane = &slice(&v, axis).slices[idx];
        let img = Tensor::new(&[1, plane.rows, plane.cols], plane.data.clone()).unwrap();
        let (target, align) = mfb_target(axis, plane.rows, plane.cols, 4);
        let out = mfb_forward(&tape, &p, &branch_prefix(axis), &net.config, &img, target, align).unwrap();
        assert_eq!(out.shape(), &expect);
        let i_mr = resample_planes(&img, target, align).unwrap();
        assert_eq!(out.data(), i_mr.data());
    }
}

#[test]
fn mbfe_branch_shapes_and_constant_input() {
    let net = CuboidNet::new(tiny(), 5).unwrap();
    let v = VideoCuboid::from_fn(4, 16, 16, |_, _, _| 0.625).unwrap();
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    let b = mbfe_forward(&tape, &p, &net.config, &v).unwrap();
    assert_eq!(b[0].shape(), &[1, 4, 64, 64]);
    assert_eq!(b[1].shape(), &[1, 16, 64, 7]);
    assert_eq!(b[2].shape(), &[1, 16, 64, 7]);
    for var in &b {
        assert!(var.data().iter().all(|&x| (x - 0.625).abs() < 1e-12));
    }
}

#[test]
fn shared_branch_weights_commute_with_slice_order() {
    let mut net = CuboidNet::new(tiny(), 6).unwrap();
    randomise(&mut net, 6, 0.2);
    let v = clip(4, 6, 5).map(|x| x / 255.0);
    // Reverse frame order: branch 1 slices come out reversed.
    let rev = VideoCuboid::from_fn(4, 6, 5, |t, y, x| v.get(3 - t, y, x)).unwrap();
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    let a = mbfe_forward(&tape, &p, &net.config, &v).unwrap();
    let b = mbfe_forward(&tape, &p, &net.config, &rev).unwrap();
    let per = 24 * 20;
    for t in 0..4 {
        let fa = &a[0].data()[t * per..(t + 1) * per];
        let fb = &b[0].data()[(3 - t) * per..(4 - t) * per];
        assert!(max_diff(fa, fb) < 1e-12);
    }
}

// ---- RB / MBR ----------------------------------------------------------

#[test]
fn rb_output_geometry() {
    let net = CuboidNet::new(tiny(), 7).unwrap();
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    let b1 = tape.constant(Tensor::full(&[1, 4, 64, 64], 0.5));
    let out = rb_forward(&tape, &p, &rb_prefix(SliceAxis::Time), SliceAxis::Time, &net.config, &b1).unwrap();
    assert_eq!(out.shape(), &[1, 7, 64, 64]);
    let b2 = tape.constant(Tensor::full(&[1, 16, 64, 7], 0.5));
    for axis in [SliceAxis::Width, SliceAxis::Height] {
        let out = rb_forward(&tape, &p, &rb_prefix(axis), axis, &net.config, &b2).unwrap();
        assert_eq!(out.shape(), &[1, 7, 64, 64]);
    }
}

#[test]
fn rb_zero_head_gives_zero_volume_without_skip() {
    let cfg = NetworkConfig { skip_grounded: false, ..tiny() };
    let mut net = CuboidNet::new(cfg, 8).unwrap();
    zero_prefix(&mut net, "mbr.rb1.out.");
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    let x = tape.constant(Tensor::randn(&[1, 3, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(8)));
    let out = rb_forward(&tape, &p, "mbr.rb1", SliceAxis::Time, &net.config, &x).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fusion_zero_weights_give_zero_output_without_skip() {
    let cfg = NetworkConfig { skip_grounded: false, enable_qe: false, enable_cfqe: false, ..tiny() };
    let mut net = CuboidNet::new(cfg, 9).unwrap();
    randomise(&mut net, 9, 0.2);
    zero_prefix(&mut net, "mbr.fuse");
    let tape = Tape::inference();
    let (_, out) = net.forward(&tape, &clip(4, 16, 16)).unwrap();
    assert_eq!(out.shape(), &[7, 64, 64]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_reaches_parameters() {
    let mut net = CuboidNet::new(tiny(), 10).unwrap();
    randomise_active(&mut net, 10);
    let v = clip(3, 5, 6);
    let tape = Tape::new();
    let (p, out) = net.forward(&tape, &v).unwrap();
    let r = Tensor::randn(out.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    let loss = tape.sum(&tape.mul(&out, &tape.constant(r)).unwrap()).unwrap();
    let grads = p.gradients(&tape.backward(&loss).unwrap());
    for axis in SliceAxis::ALL {
        let norm: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{}.", rb_prefix(axis))))
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum();
        assert!(norm > 0.0, "{axis:?}");
    }
    // PReLU slopes only see negative inputs, which this setup avoids.
    let total: usize = grads.values().map(Vec::len).sum();
    let nonzero: usize = grads.values().flat_map(|g| g.iter()).filter(|&&g| g != 0.0).count();
    assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero} of {total}");
}

#[test]
fn full_network_finite_difference_spot_check() {
    let mut net = CuboidNet::new(tiny(), 12).unwrap();
    randomise(&mut net, 12, 0.3);
    let v = clip(3, 4, 5);
    let r = Tensor::randn(&[5, 16, 20], 1.0, &mut ChaCha8Rng::seed_from_u64(13));
    let loss_of = |net: &CuboidNet| {
        let tape = Tape::inference();
        let (_, out) = net.forward(&tape, &v).unwrap();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let tape = Tape::new();
    let (p, out) = net.forward(&tape, &v).unwrap();
    let loss = tape.sum(&tape.mul(&out, &tape.constant(r.clone())).unwrap()).unwrap();
    let grads = p.gradients(&tape.backward(&loss).unwrap());

    let names: Vec<String> = net.params.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..150 {
        let name = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..net.params.get(name).unwrap().numel());
        let orig = net.params.get(name).unwrap().data()[i];
        net.params.get_mut(name).unwrap().data_mut()[i] = orig + eps;
        let plus = loss_of(&net);
        net.params.get_mut(name).unwrap().data_mut()[i] = orig - eps;
        let minus = loss_of(&net);
        net.params.get_mut(name).unwrap().data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(grads[name][i], fd));
    }
    assert!(worst <= 1e-4, "{worst}");
}

// ---- QE / CBAM / CFQE --------------------------------------------------

#[test]
fn qe_zero_head_and_prelu_sites() {
    let net = CuboidNet::new(NetworkConfig::toy(), 15).unwrap();
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    for (h, w) in [(3, 3), (8, 5)] {
        let x = Tensor::randn(&[1, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let y = qe_forward(&tape, &p, "qe", &tape.constant(x.clone())).unwrap();
        assert_eq!(y.data(), x.data());
    }
    let alphas: Vec<&String> = net.params.iter().map(|(n, _)| n).filter(|n| n.ends_with(".alpha")).collect();
    assert_eq!(alphas.len(), 3);
    for n in alphas {
        assert!(n.starts_with("qe.prelu"));
        assert_eq!(net.params.get(n).unwrap().shape(), &[16]);
    }
}

#[test]
fn cbam_maps_and_contraction() {
    let mut net = CuboidNet::new(NetworkConfig::toy(), 16).unwrap();
    randomise(&mut net, 16, 0.3);
    let f = Tensor::randn(&[16, 6, 7], 1.0, &mut ChaCha8Rng::seed_from_u64(16));
    let tape = Tape::inference();
    let p = net.params.bind(&tape);
    let fv = tape.constant(f.clone());
    let ch = cbam_channel_map(&tape, &p, "cfqe.cbam0", &fv).unwrap();
    let sp = cbam_spatial_map(&tape, &p, "cfqe.cbam0", &fv).unwrap();
    assert_eq!(ch.shape(), &[16, 1, 1]);
    assert_eq!(sp.shape(), &[1, 6, 7]);
    assert!(ch.data().iter().chain(sp.data()).all(|&a| a > 0.0 && a < 1.0));
    let out = cbam_forward(&tape, &p, "cfqe.cbam0", &fv).unwrap();
    assert!(out.data().iter().zip(f.data()).all(|(o, i)| o.abs() <= i.abs()));

    zero_prefix(&mut net, "cfqe.cbam0.");
    let p = net.params.bind(&tape);
    let out = cbam_forward(&tape, &p, "cfqe.cbam0", &fv).unwrap();
    assert!(out.data().iter().zip(f.data()).all(|(o, i)| (o - i / 4.0).abs() < 1e-15));
}

#[test]
fn cfqe_zero_head_and_asymmetry() {
    let mut net = CuboidNet::new(NetworkConfig::toy(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let frames: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, 6, 5], 1.0, &mut rng)).collect();
    let tape = Tape::inference();
    let v: Vec<Var> = frames.iter().map(|t| tape.constant(t.clone())).collect();
    let p = net.params.bind(&tape);
    let y = cfqe_forward(&tape, &p, "cfqe", &v[0], &v[1], &v[2]).unwrap();
    assert_eq!(y.shape(), &[1, 6, 5]);
    assert_eq!(y.data(), frames[1].data());

    randomise(&mut net, 17, 0.3);
    let p = net.params.bind(&tape);
    let a = cfqe_forward(&tape, &p, "cfqe", &v[0], &v[1], &v[2]).unwrap();
    let b = cfqe_forward(&tape, &p, "cfqe", &v[2], &v[1], &v[0]).unwrap();
    assert!(max_diff(a.data(), b.data()) > 1e-6);
}

#[test]
fn disabling_cfqe_changes_only_odd_frames() {
    let mut net = CuboidNet::new(tiny(), 18).unwrap();
    randomise(&mut net, 18, 0.2);
    let v = clip(4, 6, 6);
    let full = net.super_resolve(&v).unwrap();
    let light = net.with_modules(true, false).unwrap().super_resolve(&v).unwrap();
    let per = 24 * 24;
    for t in 0..7 {
        let d = max_diff(&full.values()[t * per..(t + 1) * per], &light.values()[t * per..(t + 1) * per]);
        if t % 2 == 0 {
            assert_eq!(d, 0.0, "frame {t}");
        } else {
            assert!(d > 0.0, "frame {t}");
        }
    }
}

#[test]
fn checkpoint_layout_is_checked() {
    let net = CuboidNet::new(tiny(), 0).unwrap();
    let other = NetworkConfig { resdb_count: 2, ..tiny() };
    assert!(CuboidNet::from_parts(other, net.params.clone()).is_err());
    assert!(CuboidNet::from_parts(tiny(), net.params).is_ok());
}
