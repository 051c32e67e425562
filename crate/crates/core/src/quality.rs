//! PSNR and SSIM, and the per-frame report that splits frames into
//! spatially reconstructed (SSR, even index) and interpolated (TSR, odd).

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::VideoCuboid;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn frame_dims(reference: &Tensor, test: &Tensor, what: &str) -> Result<(usize, usize)> {
    if reference.shape() != test.shape() {
        return Err(Error::contract(format!(
            "{what}: frame shapes differ ({:?} vs {:?})",
            reference.shape(),
            test.shape()
        )));
    }
    if reference.rank() != 2 {
        return Err(Error::contract(format!(
            "{what}: expected [H, W] frames, got {:?}",
            reference.shape()
        )));
    }
    Ok((reference.shape()[0], reference.shape()[1]))
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`] when the
/// mean squared error is below `1e-12`.
pub fn psnr(reference: &Tensor, test: &Tensor, max_value: f64) -> Result<f64> {
    frame_dims(reference, test, "psnr")?;
    if max_value <= 0.0 {
        return Err(Error::contract(format!("psnr: max_value must be positive, got {max_value}")));
    }
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.numel() as f64;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP_DB
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian-weighted windows.
pub fn ssim(reference: &Tensor, test: &Tensor, max_value: f64) -> Result<f64> {
    let (h, w) = frame_dims(reference, test, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (K1 * max_value).powi(2);
    let c2 = (K2 * max_value).powi(2);
    let k = gaussian_window();
    let (a, b) = (reference.data(), test.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Ssr,
    Tsr,
}

impl FrameKind {
    pub fn of_index(t: usize) -> Self {
        if t.is_multiple_of(2) {
            FrameKind::Ssr
        } else {
            FrameKind::Tsr
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameKind::Ssr => "SSR",
            FrameKind::Tsr => "TSR",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameQuality {
    pub index: usize,
    pub kind: FrameKind,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean PSNR/SSIM over a group of frames; NaN when the group is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr_db: f64,
    pub ssim: f64,
    pub frames: usize,
}

impl Aggregate {
    fn over<'a>(frames: impl Iterator<Item = &'a FrameQuality>) -> Self {
        let (mut p, mut s, mut n) = (0.0, 0.0, 0);
        for f in frames {
            p += f.psnr_db;
            s += f.ssim;
            n += 1;
        }
        let d = n as f64;
        Aggregate {
            psnr_db: if n == 0 { f64::NAN } else { p / d },
            ssim: if n == 0 { f64::NAN } else { s / d },
            frames: n,
        }
    }

    /// Frame-weighted mean of several aggregates.
    pub fn pooled(parts: &[Aggregate]) -> Self {
        let n: usize = parts.iter().map(|a| a.frames).sum();
        let d = n as f64;
        let sum = |f: fn(&Aggregate) -> f64| parts.iter().filter(|a| a.frames > 0).map(|a| f(a) * a.frames as f64).sum::<f64>() / d;
        Aggregate {
            psnr_db: if n == 0 { f64::NAN } else { sum(|a| a.psnr_db) },
            ssim: if n == 0 { f64::NAN } else { sum(|a| a.ssim) },
            frames: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub frames: Vec<FrameQuality>,
    pub ssr: Aggregate,
    pub tsr: Aggregate,
    pub stsr: Aggregate,
}

impl QualityReport {
    pub fn from_frames(frames: Vec<FrameQuality>) -> Self {
        let ssr = Aggregate::over(frames.iter().filter(|f| f.kind == FrameKind::Ssr));
        let tsr = Aggregate::over(frames.iter().filter(|f| f.kind == FrameKind::Tsr));
        let stsr = Aggregate::over(frames.iter());
        Self { frames, ssr, tsr, stsr }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,kind,psnr_db,ssim\n");
        for f in &self.frames {
            writeln!(s, "{},{},{:.4},{:.4}", f.index, f.kind, f.psnr_db, f.ssim).unwrap();
        }
        for (label, kind, a) in [
            ("AGG_SSR", "SSR", &self.ssr),
            ("AGG_TSR", "TSR", &self.tsr),
            ("AGG_STSR", "ALL", &self.stsr),
        ] {
            writeln!(s, "{label},{kind},{:.4},{:.4}", a.psnr_db, a.ssim).unwrap();
        }
        s
    }
}

/// Per-frame PSNR/SSIM of `test` against `reference` on the reference's range.
pub fn evaluate(reference: &VideoCuboid, test: &VideoCuboid) -> Result<QualityReport> {
    if reference.dims() != test.dims() {
        return Err(Error::contract(format!(
            "evaluate: reference is {:?} but test is {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    let n = reference.n_frames();
    if n.is_multiple_of(2) {
        return Err(Error::contract(format!("evaluate: frame count must be odd, got {n}")));
    }
    let max = reference.value_max();
    let frames = (0..n)
        .map(|t| {
            let (a, b) = (reference.frame_tensor(t), test.frame_tensor(t));
            Ok(FrameQuality {
                index: t,
                kind: FrameKind::of_index(t),
                psnr_db: psnr(&a, &b, max)?,
                ssim: ssim(&a, &b, max)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityReport::from_frames(frames))
}
