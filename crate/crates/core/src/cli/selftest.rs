//! Built-in consistency checks: finite-difference gradients for every
//! differentiable op, convolution against direct loops, slicing round
//! trips, metric identities and the untrained-network identity chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::net::{CuboidNet, NetworkConfig};
use crate::quality::{psnr, ssim};
use crate::tensor::{grad_check, Alignment, Tape, Tensor, Var};
use crate::video::{bicubic_baseline_values, reassemble, slice, SliceAxis, VideoCuboid};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.measured <= self.tolerance
    }

    fn from(name: impl Into<String>, measured: Result<f64>, tolerance: f64) -> Self {
        let (measured, error) = match measured {
            Ok(m) if m.is_nan() => (f64::INFINITY, Some("NaN".into())),
            Ok(m) => (m, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        Self {
            name: name.into(),
            measured,
            tolerance,
            error,
        }
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => format!("{status} {}: {e}", self.name),
            None => format!(
                "{status} {}: measured {:.3e}, tolerance {:.1e}",
                self.name, self.measured, self.tolerance
            ),
        }
    }
}

type OpFn = Box<dyn Fn(&Tape, &Var) -> Result<Var>>;

/// Name, scalar function and evaluation point.
pub type OpCase = (&'static str, OpFn, Tensor);

/// Random tensor with every entry at least `gap` away from zero.
fn off_kink(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * (1.0 + rng.random::<f64>());
        }
    }
    t
}

/// Weighted sum `sum(y * r)` with fixed random `r`, so every output
/// element contributes a distinct weight.
fn weighted(tape: &Tape, y: &Var, r: &Tensor) -> Result<Var> {
    tape.sum(&tape.mul(y, &tape.constant(r.clone()))?)
}

/// Scalar test functions, one per differentiable op (and operand), with
/// the point at which to check them.
pub fn op_catalogue(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let k2 = g(&[2, 2, 3, 3]);
    let b2 = g(&[2]);
    let x2 = g(&[2, 5, 4]);
    let r2 = g(&[2, 5, 4]);
    let x2s = g(&[2, 5, 5]);
    let r2s = g(&[2, 3, 3]);
    let k3 = g(&[2, 1, 3, 3, 3]);
    let x3 = g(&[1, 3, 4, 4]);
    let r3 = g(&[2, 3, 4, 4]);
    let kt = g(&[2, 1, 3, 1, 1]);
    let xt = g(&[2, 3, 2, 2]);
    let rt = g(&[1, 5, 2, 2]);
    let alpha = g(&[3]);
    let r_c = g(&[3, 4, 5]);
    let other = g(&[3, 4, 5]);
    let bc = g(&[3, 1, 1]);
    let r_cat = g(&[5, 4, 5]);
    let r_perm = g(&[5, 3, 4]);
    let r_narrow = g(&[3, 2, 5]);
    let r_pool_c = g(&[3, 1, 1]);
    let r_pool_s = g(&[1, 4, 5]);
    let r_res = g(&[3, 9, 5]);
    let r_res_down = g(&[3, 4, 2]);
    let target = g(&[3, 4, 5]);
    let x = g(&[3, 4, 5]);
    let kinkless = off_kink(&[3, 4, 5], 0.05, &mut rng);

    let mut out: Vec<OpCase> = Vec::new();
    {
        let (k, b, r) = (k2.clone(), b2.clone(), r2.clone());
        out.push((
            "conv2d/input",
            Box::new(move |t, v| {
                let y = t.conv2d(v, &t.constant(k.clone()), Some(&t.constant(b.clone())), 1, 1)?;
                weighted(t, &y, &r)
            }),
            x2.clone(),
        ));
    }
    {
        let (x, b, r) = (x2s.clone(), b2.clone(), r2s.clone());
        out.push((
            "conv2d/kernel (stride 2)",
            Box::new(move |t, v| {
                let y = t.conv2d(&t.constant(x.clone()), v, Some(&t.constant(b.clone())), 2, 1)?;
                weighted(t, &y, &r)
            }),
            k2.clone(),
        ));
    }
    {
        let (x, k, r) = (x2.clone(), k2.clone(), r2.clone());
        out.push((
            "conv2d/bias",
            Box::new(move |t, v| {
                let y = t.conv2d(&t.constant(x.clone()), &t.constant(k.clone()), Some(v), 1, 1)?;
                weighted(t, &y, &r)
            }),
            b2.clone(),
        ));
    }
    {
        let (k, r) = (k3.clone(), r3.clone());
        out.push((
            "conv3d/input",
            Box::new(move |t, v| weighted(t, &t.conv3d(v, &t.constant(k.clone()), None, [1; 3], [1; 3])?, &r)),
            x3.clone(),
        ));
    }
    {
        let (x, r) = (x3.clone(), r3.clone());
        out.push((
            "conv3d/kernel",
            Box::new(move |t, v| weighted(t, &t.conv3d(&t.constant(x.clone()), v, None, [1; 3], [1; 3])?, &r)),
            k3.clone(),
        ));
    }
    {
        let (k, r) = (kt.clone(), rt.clone());
        out.push((
            "conv_transpose3d/input",
            Box::new(move |t, v| {
                let y = t.conv_transpose3d(v, &t.constant(k.clone()), None, [2, 1, 1], [1, 0, 0], [5, 2, 2])?;
                weighted(t, &y, &r)
            }),
            xt.clone(),
        ));
    }
    {
        let (x, r) = (xt.clone(), rt.clone());
        out.push((
            "conv_transpose3d/kernel",
            Box::new(move |t, v| {
                let y = t.conv_transpose3d(&t.constant(x.clone()), v, None, [2, 1, 1], [1, 0, 0], [5, 2, 2])?;
                weighted(t, &y, &r)
            }),
            kt.clone(),
        ));
    }
    let unary: [(&'static str, fn(&Tape, &Var) -> Result<Var>); 6] = [
        ("relu", |t, v| t.relu(v)),
        ("leaky_relu", |t, v| t.leaky_relu(v, 0.1)),
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("scale", |t, v| t.scale(v, -1.7)),
        ("reshape", |t, v| t.reshape(v, &[3, 20]).and_then(|y| t.reshape(&y, &[3, 4, 5]))),
        ("mean", |t, v| t.mul(v, v).and_then(|y| t.mean(&y))),
    ];
    for (name, f) in unary {
        let r = r_c.clone();
        out.push((
            name,
            Box::new(move |t, v| {
                let y = f(t, v)?;
                if y.shape().len() == 3 {
                    weighted(t, &y, &r)
                } else {
                    Ok(y)
                }
            }),
            kinkless.clone(),
        ));
    }
    {
        let (a, r) = (alpha.clone(), r_c.clone());
        out.push((
            "prelu/input",
            Box::new(move |t, v| weighted(t, &t.prelu(v, &t.constant(a.clone()))?, &r)),
            kinkless.clone(),
        ));
    }
    {
        let (x, r) = (kinkless.clone(), r_c.clone());
        out.push((
            "prelu/alpha",
            Box::new(move |t, v| weighted(t, &t.prelu(&t.constant(x.clone()), v)?, &r)),
            alpha.clone(),
        ));
    }
    {
        let (o, r) = (other.clone(), r_c.clone());
        out.push(("add", Box::new(move |t, v| weighted(t, &t.add(v, &t.constant(o.clone()))?, &r)), x.clone()));
    }
    {
        let (o, r) = (other.clone(), r_c.clone());
        out.push(("sub", Box::new(move |t, v| weighted(t, &t.sub(&t.constant(o.clone()), v)?, &r)), x.clone()));
    }
    {
        let (o, r) = (bc.clone(), r_c.clone());
        out.push((
            "mul/full operand",
            Box::new(move |t, v| weighted(t, &t.mul(v, &t.constant(o.clone()))?, &r)),
            x.clone(),
        ));
    }
    {
        let (o, r) = (x.clone(), r_c.clone());
        out.push((
            "mul/broadcast operand",
            Box::new(move |t, v| weighted(t, &t.mul(&t.constant(o.clone()), v)?, &r)),
            bc.clone(),
        ));
    }
    {
        let (o, r) = (g_cat_other(&x), r_cat.clone());
        out.push((
            "concat",
            Box::new(move |t, v| weighted(t, &t.concat(&[&t.constant(o.clone()), v], 0)?, &r)),
            x.clone(),
        ));
    }
    {
        let r = r_perm.clone();
        out.push(("permute", Box::new(move |t, v| weighted(t, &t.permute(v, &[2, 0, 1])?, &r)), x.clone()));
    }
    {
        let r = r_narrow.clone();
        out.push(("narrow", Box::new(move |t, v| weighted(t, &t.narrow(v, 1, 1, 2)?, &r)), x.clone()));
    }
    {
        let r = r_res.clone();
        out.push((
            "resample_axis/up",
            Box::new(move |t, v| weighted(t, &t.resample_axis(v, 1, 9, Alignment::Corners)?, &r)),
            x.clone(),
        ));
    }
    {
        let r = r_res_down.clone();
        out.push((
            "resample_axis/down",
            Box::new(move |t, v| weighted(t, &t.resample_axis(v, 2, 2, Alignment::HalfPixel)?, &r)),
            x.clone(),
        ));
    }
    {
        let r = r_pool_c.clone();
        out.push((
            "pool_channel_stats",
            Box::new(move |t, v| {
                let (a, m) = t.pool_channel_stats(v)?;
                weighted(t, &t.add(&a, &t.scale(&m, 0.7)?)?, &r)
            }),
            x.clone(),
        ));
    }
    {
        let r = r_pool_s.clone();
        out.push((
            "pool_spatial_stats",
            Box::new(move |t, v| {
                let (a, m) = t.pool_spatial_stats(v)?;
                weighted(t, &t.add(&a, &t.scale(&m, 0.7)?)?, &r)
            }),
            x.clone(),
        ));
    }
    {
        let tg = target.clone();
        out.push(("mse", Box::new(move |t, v| t.mse(v, &t.constant(tg.clone()))), x.clone()));
    }
    out.push(("sum", Box::new(|t, v| t.sum(v)), x));
    out
}

fn g_cat_other(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().take(2 * 4 * 5).map(|v| 0.5 - v).collect();
    Tensor::new(&[2, 4, 5], data).expect("shape")
}

/// Maximum finite-difference error of every catalogue entry over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>, tolerance: f64) -> Vec<CheckResult> {
    let mut worst: Vec<(String, Result<f64>)> = Vec::new();
    for seed in seeds {
        for (i, (name, f, x)) in op_catalogue(seed).into_iter().enumerate() {
            let err = grad_check(f, &x, 1e-5);
            if worst.len() <= i {
                worst.push((format!("grad_check {name}"), Ok(0.0)));
            }
            worst[i].1 = match (&worst[i].1, err) {
                (Err(_), _) => continue,
                (_, Err(e)) => Err(e),
                (Ok(a), Ok(b)) => Ok(a.max(b)),
            };
        }
    }
    worst
        .into_iter()
        .map(|(n, r)| CheckResult::from(n, r, tolerance))
        .collect()
}

fn brute_conv2d(x: &Tensor, k: &Tensor, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let (iy, ix) = ((y + dy) as isize - pad as isize, (xx + dx) as isize - pad as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

fn conv_oracle_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let tape = Tape::inference();
        let y = tape.conv2d(&tape.constant(x.clone()), &tape.constant(k.clone()), None, 1, 1)?;
        let expect = brute_conv2d(&x, &k, 1);
        worst = y.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

fn slice_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0.0;
    for _ in 0..20 {
        let (n, h, w) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9));
        let v = VideoCuboid::from_fn(n, h, w, |_, _, _| rng.random_range(0.0..255.0))?;
        for axis in SliceAxis::ALL {
            if reassemble(&slice(&v, axis))? != v {
                mismatches += 1.0;
            }
        }
    }
    Ok(mismatches)
}

fn metric_checks() -> Vec<CheckResult> {
    let a = Tensor::full(&[16, 16], 100.0);
    // Alternating +-sqrt(65.025) gives MSE 65.025.
    let d = 65.025f64.sqrt();
    let b = Tensor::new(
        &[16, 16],
        (0..256).map(|i| if i % 2 == 0 { 100.0 + d } else { 100.0 - d }).collect(),
    )
    .expect("shape");
    let zeros = Tensor::zeros(&[16, 16]);
    let full = Tensor::full(&[16, 16], 255.0);
    let c1 = (0.01f64 * 255.0).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Tensor::uniform(&[20, 20], 0.0, 255.0, &mut rng);
    vec![
        CheckResult::from("psnr 30 dB oracle", psnr(&a, &b, 255.0).map(|p| (p - 30.0).abs()), 1e-6),
        CheckResult::from("ssim identity", ssim(&noise, &noise, 255.0).map(|s| (s - 1.0).abs()), 1e-9),
        CheckResult::from(
            "ssim constant 0 vs 255",
            ssim(&zeros, &full, 255.0).map(|s| (s - c1 / (255.0 * 255.0 + c1)).abs()),
            1e-9,
        ),
    ]
}

fn identity_chain_check() -> Result<f64> {
    let cfg = NetworkConfig {
        base_channels: 4,
        resdb_growth: 2,
        cbam_reduction: 2,
        resdb_count: 1,
        conv3d_count: 1,
        ..NetworkConfig::toy()
    };
    let net = CuboidNet::new(cfg, 1)?;
    let v = VideoCuboid::from_fn(3, 4, 5, |t, y, x| ((7 * t + 13 * y + 29 * x) % 256) as f64)?;
    let tape = Tape::inference();
    let (_, out) = net.forward(&tape, &v)?;
    let base = bicubic_baseline_values(&v, 4);
    Ok(out
        .data()
        .iter()
        .zip(&base)
        .map(|(a, b)| (a * 255.0 - b).abs())
        .fold(0.0, f64::max))
}

/// Every built-in check, in a fixed order.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = gradient_suite(0..3, 1e-6);
    out.push(CheckResult::from("conv2d vs direct loops", conv_oracle_check(), 1e-12));
    out.push(CheckResult::from("slice/reassemble round trip (mismatches)", slice_check(), 0.0));
    out.extend(metric_checks());
    out.push(CheckResult::from("zero-residual identity chain", identity_chain_check(), 1e-9));
    out
}
