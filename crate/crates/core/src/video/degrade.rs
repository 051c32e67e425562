//! Training-pair generation: spatial bicubic downscale plus dropping every
//! other frame, patch cropping, and the plain bicubic space-time upscale
//! that serves as the reference anchor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::resample::resample_axis_raw;
use crate::tensor::{bicubic_resample_2d, Alignment};
use crate::video::VideoCuboid;

pub const SPATIAL_FACTOR: usize = 4;

/// Frames kept from a clip of `n` frames: zero-based indices 0, 2, 4, ...
pub fn kept_frames(n: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(2)
}

/// Low-resolution, low-frame-rate version of a ground-truth clip.
///
/// Keeps frames at even zero-based indices and bicubic-downsamples each by
/// `spatial_factor`; `N` must be odd and the frame size divisible.
pub fn degrade(v: &VideoCuboid, spatial_factor: usize) -> Result<VideoCuboid> {
    let (n, h, w) = v.dims();
    if n % 2 == 0 {
        return Err(Error::contract(format!(
            "degrade needs an odd frame count, got {n}"
        )));
    }
    if spatial_factor == 0 || h % spatial_factor != 0 || w % spatial_factor != 0 {
        return Err(Error::contract(format!(
            "frame size {h}x{w} is not divisible by spatial factor {spatial_factor}"
        )));
    }
    let (lh, lw) = (h / spatial_factor, w / spatial_factor);
    let mut values = Vec::with_capacity(n.div_ceil(2) * lh * lw);
    for t in kept_frames(n) {
        let small = bicubic_resample_2d(&v.frame_tensor(t), (lh, lw))?;
        values.extend_from_slice(small.data());
    }
    VideoCuboid::new(n.div_ceil(2), lh, lw, values, v.value_max())
}

/// Ground-truth patch and its degraded network input.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub input_patch: VideoCuboid,
    pub label_patch: VideoCuboid,
    pub source_offset: (usize, usize, usize),
}

/// Crops a `(frames, extent, extent)` label at `origin` and degrades it.
///
/// The label frame count must be odd; the spatial origin must lie on the
/// `spatial_factor` grid.
pub fn crop_patch_pair(
    v: &VideoCuboid,
    origin: (usize, usize, usize),
    frames: usize,
    extent: usize,
    spatial_factor: usize,
) -> Result<PatchPair> {
    let (_, y0, x0) = origin;
    if y0 % spatial_factor != 0 || x0 % spatial_factor != 0 {
        return Err(Error::contract(format!(
            "patch origin ({y0}, {x0}) is not a multiple of {spatial_factor}"
        )));
    }
    let label = v.crop(origin, (frames, extent, extent))?;
    let input = degrade(&label, spatial_factor)?;
    Ok(PatchPair {
        input_patch: input,
        label_patch: label,
        source_offset: origin,
    })
}

/// Seeded source of patch offsets.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    rng: ChaCha8Rng,
    spatial_factor: usize,
}

impl PatchSampler {
    pub fn new(seed: u64, spatial_factor: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spatial_factor,
        }
    }

    /// Uniform grid-aligned origin for an `extent`-sized crop starting at frame 0.
    pub fn next_origin(&mut self, dims: (usize, usize, usize), extent: usize) -> Result<(usize, usize, usize)> {
        let (_, h, w) = dims;
        if extent > h || extent > w {
            return Err(Error::contract(format!(
                "patch extent {extent} does not fit a {h}x{w} clip"
            )));
        }
        let f = self.spatial_factor;
        let y_slots = (h - extent) / f + 1;
        let x_slots = (w - extent) / f + 1;
        let y = self.rng.random_range(0..y_slots) * f;
        let x = self.rng.random_range(0..x_slots) * f;
        Ok((0, y, x))
    }

    pub fn sample(
        &mut self,
        v: &VideoCuboid,
        frames: usize,
        extent: usize,
    ) -> Result<PatchPair> {
        let origin = self.next_origin(v.dims(), extent)?;
        crop_patch_pair(v, origin, frames, extent, self.spatial_factor)
    }
}

/// Output frame count for an `n`-frame input.
pub fn upsampled_frames(n: usize) -> usize {
    2 * n - 1
}

/// Separable bicubic space-time upscale, unclamped: `factor`x on both
/// spatial axes (half-pixel aligned) and `N -> 2N - 1` in time with output
/// frame `2k` sitting on input frame `k`.
pub fn bicubic_baseline_values(v: &VideoCuboid, factor: usize) -> Vec<f64> {
    let (n, h, w) = v.dims();
    let rows = resample_axis_raw(v.values(), &[n, h, w], 1, h * factor, Alignment::HalfPixel);
    let planes = resample_axis_raw(&rows, &[n, h * factor, w], 2, w * factor, Alignment::HalfPixel);
    resample_axis_raw(
        &planes,
        &[n, h * factor, w * factor],
        0,
        upsampled_frames(n),
        Alignment::Corners,
    )
}

/// [`bicubic_baseline_values`] clamped into the value range.
pub fn bicubic_baseline(v: &VideoCuboid, factor: usize) -> Result<VideoCuboid> {
    let (n, h, w) = v.dims();
    VideoCuboid::new(
        upsampled_frames(n),
        h * factor,
        w * factor,
        bicubic_baseline_values(v, factor),
        v.value_max(),
    )
    .map(VideoCuboid::clamped)
}
