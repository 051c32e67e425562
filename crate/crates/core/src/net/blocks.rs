//! Network building blocks. Each block has a `declare_*` function that adds
//! its parameters to an [`Initializer`] and a `*_forward` function that
//! reads them back by the same names.

use crate::error::{Error, Result};
use crate::net::params::{BoundParams, Initializer};
use crate::net::NetworkConfig;
use crate::tensor::{resample_planes, Alignment, Tape, Tensor, Var};
use crate::video::SliceAxis;

fn conv2d(tape: &Tape, p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let pad = w.shape()[2] / 2;
    tape.conv2d(x, w, Some(p.get(&format!("{name}.bias"))?), 1, pad)
}

fn conv3d(tape: &Tape, p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let pad = w.shape()[2] / 2;
    tape.conv3d(x, w, Some(p.get(&format!("{name}.bias"))?), [1; 3], [pad; 3])
}

// ---- ResDB -------------------------------------------------------------

pub(crate) fn declare_resdb(init: &mut Initializer, prefix: &str, c: usize, g: usize) -> Result<()> {
    for i in 0..3 {
        init.conv2d(&format!("{prefix}.dense{i}"), g, c + i * g, 3, false)?;
    }
    init.conv2d(&format!("{prefix}.fuse"), c, 3 * g, 1, false)
}

/// Residual dense block: three densely connected 3x3 conv+ReLU layers, a
/// 1x1 conv over their concatenation, and an identity skip.
pub fn resdb_forward(tape: &Tape, p: &BoundParams, prefix: &str, x: &Var) -> Result<Var> {
    let c = p.get(&format!("{prefix}.fuse.weight"))?.shape()[0];
    if x.shape().len() != 3 || x.shape()[0] != c {
        return Err(Error::contract(format!(
            "ResDB {prefix} expects [{c}, h, w], got {:?}",
            x.shape()
        )));
    }
    let mut inputs = vec![x.clone()];
    let mut layers = Vec::with_capacity(3);
    for i in 0..3 {
        let refs: Vec<&Var> = inputs.iter().collect();
        let cat = if refs.len() == 1 {
            x.clone()
        } else {
            tape.concat(&refs, 0)?
        };
        let l = tape.relu(&conv2d(tape, p, &format!("{prefix}.dense{i}"), &cat)?)?;
        inputs.push(l.clone());
        layers.push(l);
    }
    let refs: Vec<&Var> = layers.iter().collect();
    let r = conv2d(tape, p, &format!("{prefix}.fuse"), &tape.concat(&refs, 0)?)?;
    tape.add(x, &r)
}

// ---- MFB ---------------------------------------------------------------

pub(crate) fn declare_mfb(init: &mut Initializer, prefix: &str, cfg: &NetworkConfig) -> Result<()> {
    let c = cfg.base_channels;
    init.conv2d(&format!("{prefix}.shallow0"), c, 1, 3, false)?;
    init.conv2d(&format!("{prefix}.shallow1"), c, c, 3, false)?;
    for i in 0..cfg.resdb_count {
        declare_resdb(init, &format!("{prefix}.resdb{i}"), c, cfg.resdb_growth)?;
    }
    init.conv2d(&format!("{prefix}.reduce"), c, c * cfg.resdb_count, 1, false)?;
    init.conv2d(&format!("{prefix}.recon0"), c, c, 3, false)?;
    init.conv2d(&format!("{prefix}.recon1"), 1, c, 3, true)
}

/// Upsampling target and per-axis alignment for the slices of one branch.
///
/// Rows of every slice are spatial. Columns are spatial for the time branch
/// and temporal (corner aligned, `N -> 2N - 1`) for the other two.
pub fn mfb_target(axis: SliceAxis, rows: usize, cols: usize, factor: usize) -> ((usize, usize), (Alignment, Alignment)) {
    match axis {
        SliceAxis::Time => (
            (rows * factor, cols * factor),
            (Alignment::HalfPixel, Alignment::HalfPixel),
        ),
        SliceAxis::Width | SliceAxis::Height => (
            (rows * factor, 2 * cols - 1),
            (Alignment::HalfPixel, Alignment::Corners),
        ),
    }
}

/// Multi-feature block on one `[1, a, b]` slice image.
pub fn mfb_forward(
    tape: &Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &NetworkConfig,
    slice: &Tensor,
    target: (usize, usize),
    align: (Alignment, Alignment),
) -> Result<Var> {
    let s = slice.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::contract(format!(
            "MFB input must be a single-channel [1, a, b] slice, got {s:?}"
        )));
    }
    let i_mr = tape.constant(resample_planes(slice, target, align)?);
    let mut f = tape.relu(&conv2d(tape, p, &format!("{prefix}.shallow0"), &i_mr)?)?;
    f = tape.relu(&conv2d(tape, p, &format!("{prefix}.shallow1"), &f)?)?;
    let mut feats = Vec::with_capacity(cfg.resdb_count);
    for i in 0..cfg.resdb_count {
        f = resdb_forward(tape, p, &format!("{prefix}.resdb{i}"), &f)?;
        feats.push(f.clone());
    }
    let refs: Vec<&Var> = feats.iter().collect();
    let cat = if refs.len() == 1 {
        f.clone()
    } else {
        tape.concat(&refs, 0)?
    };
    let fp = tape.leaky_relu(&conv2d(tape, p, &format!("{prefix}.reduce"), &cat)?, cfg.leaky_slope)?;
    let h = tape.relu(&conv2d(tape, p, &format!("{prefix}.recon0"), &fp)?)?;
    let residual = conv2d(tape, p, &format!("{prefix}.recon1"), &h)?;
    tape.add(&i_mr, &residual)
}

// ---- RB ----------------------------------------------------------------

/// `(kernel, stride, padding)` of the depth-only transposed conv.
pub fn rb_upsample_geometry(axis: SliceAxis, factor: usize) -> (usize, usize, usize) {
    match axis {
        SliceAxis::Time => (3, 2, 1),
        SliceAxis::Width | SliceAxis::Height => (2 * factor, factor, factor / 2),
    }
}

pub(crate) fn declare_rb(init: &mut Initializer, prefix: &str, axis: SliceAxis, cfg: &NetworkConfig) -> Result<()> {
    let c = cfg.base_channels;
    for i in 0..cfg.conv3d_count {
        init.conv3d(&format!("{prefix}.conv{i}"), c, if i == 0 { 1 } else { c }, 3, false)?;
    }
    let (k, s, _) = rb_upsample_geometry(axis, cfg.spatial_factor);
    init.conv_t_depth(&format!("{prefix}.up"), c, c, k, s)?;
    init.conv3d(&format!("{prefix}.out"), 1, c, 3, cfg.skip_grounded)
}

/// Reconstruction block on a stacked branch volume `[1, D, a, b]`.
///
/// Upsamples `D` (time for branch 1, width or height for the others) and
/// returns the volume in `[1, frames, rows, cols]` order.
pub fn rb_forward(
    tape: &Tape,
    p: &BoundParams,
    prefix: &str,
    axis: SliceAxis,
    cfg: &NetworkConfig,
    volume: &Var,
) -> Result<Var> {
    let s = volume.shape().to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::contract(format!(
            "RB expects a stacked [1, D, a, b] volume, got {s:?}"
        )));
    }
    let d = s[1];
    let (k, stride, pad) = rb_upsample_geometry(axis, cfg.spatial_factor);
    let (d_out, align) = match axis {
        SliceAxis::Time => (2 * d - 1, Alignment::Corners),
        _ => (d * cfg.spatial_factor, Alignment::HalfPixel),
    };
    let mut f = volume.clone();
    for i in 0..cfg.conv3d_count {
        f = tape.relu(&conv3d(tape, p, &format!("{prefix}.conv{i}"), &f)?)?;
    }
    let up = tape.conv_transpose3d(
        &f,
        p.get(&format!("{prefix}.up.weight"))?,
        Some(p.get(&format!("{prefix}.up.bias"))?),
        [stride, 1, 1],
        [pad, 0, 0],
        [d_out, s[2], s[3]],
    )?;
    debug_assert_eq!(k, p.get(&format!("{prefix}.up.weight"))?.shape()[2]);
    let up = tape.leaky_relu(&up, cfg.leaky_slope)?;
    let mut out = conv3d(tape, p, &format!("{prefix}.out"), &up)?;
    if cfg.skip_grounded {
        out = tape.add(&out, &tape.resample_axis(volume, 1, d_out, align)?)?;
    }
    match axis {
        SliceAxis::Time => Ok(out),
        // (x, y, t) -> (t, y, x)
        SliceAxis::Width => tape.permute(&out, &[0, 3, 2, 1]),
        // (y, x, t) -> (t, y, x)
        SliceAxis::Height => tape.permute(&out, &[0, 3, 1, 2]),
    }
}

// ---- QE ----------------------------------------------------------------

pub(crate) fn declare_qe(init: &mut Initializer, prefix: &str, c: usize) -> Result<()> {
    for i in 0..3 {
        init.conv2d(&format!("{prefix}.conv{i}"), c, if i == 0 { 1 } else { c }, 3, false)?;
        init.prelu(&format!("{prefix}.prelu{i}"), c)?;
    }
    init.conv2d(&format!("{prefix}.out"), 1, c, 3, true)
}

/// Per-frame quality enhancement on `[1, h, w]`.
pub fn qe_forward(tape: &Tape, p: &BoundParams, prefix: &str, frame: &Var) -> Result<Var> {
    let mut f = frame.clone();
    for i in 0..3 {
        f = conv2d(tape, p, &format!("{prefix}.conv{i}"), &f)?;
        f = tape.prelu(&f, p.get(&format!("{prefix}.prelu{i}.alpha"))?)?;
    }
    let r = conv2d(tape, p, &format!("{prefix}.out"), &f)?;
    tape.add(frame, &r)
}

// ---- CBAM / CFQE -------------------------------------------------------

pub(crate) fn declare_cbam(init: &mut Initializer, prefix: &str, cfg: &NetworkConfig) -> Result<()> {
    let c = cfg.base_channels;
    let hidden = c / cfg.cbam_reduction;
    init.conv2d(&format!("{prefix}.fc0"), hidden, c, 1, false)?;
    init.conv2d(&format!("{prefix}.fc1"), c, hidden, 1, false)?;
    init.conv2d(&format!("{prefix}.spatial"), 1, 2, cfg.cbam_spatial_kernel, false)
}

/// Channel attention `[C, 1, 1]` for `f`.
pub fn cbam_channel_map(tape: &Tape, p: &BoundParams, prefix: &str, f: &Var) -> Result<Var> {
    let (avg, max) = tape.pool_channel_stats(f)?;
    let mlp = |x: &Var| -> Result<Var> {
        let h = tape.relu(&conv2d(tape, p, &format!("{prefix}.fc0"), x)?)?;
        conv2d(tape, p, &format!("{prefix}.fc1"), &h)
    };
    tape.sigmoid(&tape.add(&mlp(&avg)?, &mlp(&max)?)?)
}

/// Spatial attention `[1, h, w]` for `f`.
pub fn cbam_spatial_map(tape: &Tape, p: &BoundParams, prefix: &str, f: &Var) -> Result<Var> {
    let (avg, max) = tape.pool_spatial_stats(f)?;
    let stats = tape.concat(&[&avg, &max], 0)?;
    tape.sigmoid(&conv2d(tape, p, &format!("{prefix}.spatial"), &stats)?)
}

/// Channel then spatial attention, each multiplied into the map.
pub fn cbam_forward(tape: &Tape, p: &BoundParams, prefix: &str, f: &Var) -> Result<Var> {
    let f = tape.mul(f, &cbam_channel_map(tape, p, prefix, f)?)?;
    tape.mul(&f, &cbam_spatial_map(tape, p, prefix, &f)?)
}

pub(crate) fn declare_cfqe(init: &mut Initializer, prefix: &str, cfg: &NetworkConfig) -> Result<()> {
    let c = cfg.base_channels;
    for i in 0..6 {
        init.conv2d(&format!("{prefix}.conv{i}"), c, if i == 0 { 3 } else { c }, 3, false)?;
    }
    declare_cbam(init, &format!("{prefix}.cbam0"), cfg)?;
    declare_cbam(init, &format!("{prefix}.cbam1"), cfg)?;
    init.conv2d(&format!("{prefix}.out"), 1, c, 3, true)
}

/// Cross-frame enhancement of `cur` from its two neighbours.
pub fn cfqe_forward(tape: &Tape, p: &BoundParams, prefix: &str, prev: &Var, cur: &Var, next: &Var) -> Result<Var> {
    if prev.shape() != cur.shape() || next.shape() != cur.shape() {
        return Err(Error::contract(format!(
            "CFQE frames differ in shape: {:?}, {:?}, {:?}",
            prev.shape(),
            cur.shape(),
            next.shape()
        )));
    }
    let mut f = tape.concat(&[prev, cur, next], 0)?;
    for i in 0..6 {
        f = tape.relu(&conv2d(tape, p, &format!("{prefix}.conv{i}"), &f)?)?;
        match i {
            1 => f = cbam_forward(tape, p, &format!("{prefix}.cbam0"), &f)?,
            3 => f = cbam_forward(tape, p, &format!("{prefix}.cbam1"), &f)?,
            _ => {}
        }
    }
    let r = conv2d(tape, p, &format!("{prefix}.out"), &f)?;
    tape.add(cur, &r)
}
