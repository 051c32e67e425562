//! Separable bicubic resampling.
//!
//! Keys cubic convolution with `a = -0.5`, edge-clamped taps. When shrinking,
//! the kernel is stretched by the size ratio and its taps renormalised, which
//! gives the usual antialiased downscale. Each output sample is evaluated as
//! `x[anchor] + sum w_i (x[i] - x[anchor])`, so constant signals come back
//! exactly and an identity-sized resample copies its input bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BICUBIC_A: f64 = -0.5;

/// How output sample positions map onto input positions along an axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Pixel centres: `src = (dst + 0.5) * in/out - 0.5`.
    HalfPixel,
    /// First and last samples coincide: `src = dst * (in - 1)/(out - 1)`.
    /// Used along time, where output frame `2k` is input frame `k`.
    Corners,
}

pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps contributing to one output sample.
#[derive(Clone, Debug)]
pub(crate) struct SampleTaps {
    pub anchor: usize,
    pub taps: Vec<(usize, f64)>,
}

pub(crate) fn source_position(dst: usize, in_len: usize, out_len: usize, align: Alignment) -> f64 {
    match align {
        Alignment::HalfPixel => (dst as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5,
        Alignment::Corners => {
            if out_len == 1 {
                0.0
            } else {
                dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            }
        }
    }
}

pub(crate) fn axis_taps(in_len: usize, out_len: usize, align: Alignment) -> Vec<SampleTaps> {
    let last = in_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    // Stretch factor > 1 only when shrinking.
    let stretch = match align {
        Alignment::HalfPixel => (in_len as f64 / out_len as f64).max(1.0),
        Alignment::Corners if out_len > 1 && in_len > out_len => {
            (in_len - 1) as f64 / (out_len - 1) as f64
        }
        Alignment::Corners => 1.0,
    };
    let radius = 2.0 * stretch;
    (0..out_len)
        .map(|dst| {
            let src = source_position(dst, in_len, out_len, align);
            let lo = (src - radius).ceil() as isize;
            let hi = (src + radius).floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            for i in lo..=hi {
                let w = cubic_kernel((src - i as f64) / stretch);
                if w != 0.0 {
                    taps.push((clamp(i), w));
                }
            }
            if stretch > 1.0 {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.iter_mut().for_each(|t| t.1 /= total);
            }
            SampleTaps {
                anchor: clamp(src.round() as isize),
                taps,
            }
        })
        .collect()
}

/// Resamples a flat array of shape `shape` along `axis` to `out_len`.
pub(crate) fn resample_axis_raw(
    data: &[f64],
    shape: &[usize],
    axis: usize,
    out_len: usize,
    align: Alignment,
) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if out_len == len {
        return data.to_vec();
    }
    let taps = axis_taps(len, out_len, align);
    let mut out = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        let src = &data[o * len * inner..(o + 1) * len * inner];
        for (d, st) in taps.iter().enumerate() {
            let dst = &mut out[(o * out_len + d) * inner..(o * out_len + d + 1) * inner];
            let anchor = &src[st.anchor * inner..(st.anchor + 1) * inner];
            dst.copy_from_slice(anchor);
            for &(i, w) in &st.taps {
                if i == st.anchor {
                    continue;
                }
                let row = &src[i * inner..(i + 1) * inner];
                for ((y, x), a) in dst.iter_mut().zip(row).zip(anchor) {
                    *y += w * (x - a);
                }
            }
        }
    }
    out
}

/// Bicubic resample of one axis of a tensor of any rank.
pub fn resample_axis(t: &Tensor, axis: usize, out_len: usize, align: Alignment) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::contract(format!(
            "resample axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    if out_len == 0 {
        return Err(Error::contract("resample target extent must be at least 1"));
    }
    let data = resample_axis_raw(t.data(), t.shape(), axis, out_len, align);
    let mut shape = t.shape().to_vec();
    shape[axis] = out_len;
    Tensor::new(&shape, data)
}

/// Resamples the last two axes of `image` (rank ≥ 2) to `target`, with a
/// per-axis alignment.
pub fn resample_planes(
    image: &Tensor,
    target: (usize, usize),
    align: (Alignment, Alignment),
) -> Result<Tensor> {
    let r = image.rank();
    if r < 2 {
        return Err(Error::contract(format!(
            "planar resample needs rank >= 2, got shape {:?}",
            image.shape()
        )));
    }
    let rows = resample_axis(image, r - 2, target.0, align.0)?;
    resample_axis(&rows, r - 1, target.1, align.1)
}

/// Bicubic resample of an `[H, W]` image with half-pixel alignment on both axes.
pub fn bicubic_resample_2d(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if image.rank() != 2 {
        return Err(Error::contract(format!(
            "bicubic_resample_2d expects [H, W], got {:?}",
            image.shape()
        )));
    }
    resample_planes(image, target, (Alignment::HalfPixel, Alignment::HalfPixel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_shape() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert_eq!(cubic_kernel(-1.0), 0.0);
        // Keys a=-0.5 half-sample weights.
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_is_preserved_at_any_size() {
        let img = Tensor::full(&[7, 5], 42.5);
        for &(h, w) in &[(1, 1), (3, 2), (7, 5), (28, 20), (13, 41)] {
            let out = bicubic_resample_2d(&img, (h, w)).unwrap();
            assert_eq!(out.shape(), &[h, w]);
            assert!(out.data().iter().all(|&v| v == 42.5));
        }
    }

    #[test]
    fn identity_size_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform(&[6, 9], 0.0, 255.0, &mut rng);
        let out = bicubic_resample_2d(&img, (6, 9)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn corner_alignment_hits_input_frames() {
        let t = Tensor::new(&[4, 1], vec![1.0, 7.0, -3.0, 2.0]).unwrap();
        let up = resample_axis(&t, 0, 7, Alignment::Corners).unwrap();
        for k in 0..4 {
            assert_eq!(up.data()[2 * k], t.data()[k]);
        }
        // Interior midpoint uses (-1, 9, 9, -1)/16.
        let mid = (-1.0 + 9.0 * 7.0 + 9.0 * -3.0 - 2.0) / 16.0;
        assert!((up.data()[3] - mid).abs() < 1e-12);
    }

    #[test]
    fn downscale_taps_sum_to_one() {
        for st in axis_taps(64, 16, Alignment::HalfPixel) {
            let s: f64 = st.taps.iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(st.taps.len(), 16);
        }
    }

    #[test]
    fn rejects_bad_rank() {
        let t = Tensor::zeros(&[2, 2, 2]);
        assert!(bicubic_resample_2d(&t, (4, 4)).is_err());
        assert!(resample_axis(&t, 3, 4, Alignment::HalfPixel).is_err());
    }
}
