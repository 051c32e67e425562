//! Raw convolution kernels over flat buffers.
//!
//! Everything is expressed in three spatial dimensions; 2-D convolution is
//! the special case of depth 1 with a depth-1 kernel. Products are lowered to
//! GEMM through an im2col buffer. Column buffers are rebuilt in the backward
//! pass rather than kept alive on the tape.

use std::cell::RefCell;

use crate::error::{Error, Result};

thread_local! {
    static SCRATCH: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable buffer of `len` values. The contents are stale;
/// callers must overwrite every element before reading.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let r = f(&mut buf[..len]);
    SCRATCH.with(|s| s.borrow_mut().push(buf));
    r
}

/// Stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn uniform(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// 2-D geometry embedded in 3-D (depth stride 1, no depth padding).
    pub fn planar(stride: usize, padding: usize) -> Self {
        Self {
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        }
    }
}

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

/// Output extent of a convolution along one axis; the division must be exact.
pub(crate) fn conv_out_len(
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    axis: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::contract(format!(
            "{} stride must be at least 1",
            AXIS_NAMES[axis]
        )));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::contract(format!(
            "{} extent {len} with padding {pad} is smaller than kernel extent {k}",
            AXIS_NAMES[axis]
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::contract(format!(
            "{} extent {len}: ({len} + 2*{pad} - {k}) is not divisible by stride {stride}",
            AXIS_NAMES[axis]
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// `c = op(a) * op(b) + beta * c` with row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked by the debug assertions; matrixmultiply performs no
    // other memory access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const DIRECT_MAX_OUT: usize = 2;

/// Range of output positions `o` with `0 <= o*s + k - p < len`.
fn valid_range(out_len: usize, len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if len + p > k {
        (len + p - k).div_ceil(s)
    } else {
        0
    };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Shape bookkeeping shared by the im2col and col2im loops.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lowering {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl Lowering {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        geom: ConvGeometry,
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_len(input[a], kernel[a], geom.stride[a], geom.padding[a], a)?;
        }
        Ok(Self {
            channels,
            input,
            kernel,
            output,
            geom,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geom.stride == [1, 1, 1] && self.geom.padding == [0, 0, 0]
    }

    /// Visits every output row segment of the column buffer.
    ///
    /// The callback gets the segment's column offset, the offset of the input
    /// row it samples (`None` when that row lies in depth/height padding) and
    /// the kernel x tap.
    fn for_each_run(&self, mut f: impl FnMut(usize, Option<usize>, usize)) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [sd, sh, _] = self.geom.stride;
        let [pd, ph, _] = self.geom.padding;
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row_base = row * cols;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let col_off = row_base + (oz * oh + oy) * ow;
                                if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                    f(col_off, None, 0);
                                    continue;
                                }
                                let in_off = ((c * d + iz as usize) * h + iy as usize) * w;
                                f(col_off, Some(in_off), kx);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Visits the in-bounds part of every column-buffer row segment for a
    /// width stride of 1: `(row, output offset, input offset, len)`.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (w, ow, pw) = (self.input[2], self.output[2], self.geom.padding[2]);
        let cols = self.cols();
        self.for_each_run(|col_off, in_off, kx| {
            if let Some(base) = in_off {
                let (lo, hi) = valid_range(ow, w, kx, 1, pw);
                if hi > lo {
                    let (row, seg) = (col_off / cols, col_off % cols);
                    f(row, seg + lo, base + lo + kx - pw, hi - lo);
                }
            }
        });
    }

    /// Convolutions with this few output channels skip the column buffer.
    fn use_direct(&self, out_channels: usize) -> bool {
        out_channels <= DIRECT_MAX_OUT && self.geom.stride[2] == 1 && !self.is_pointwise()
    }

    pub fn im2col(&self, input: &[f64], col: &mut [f64]) {
        debug_assert_eq!(input.len(), self.input_len());
        debug_assert_eq!(col.len(), self.rows() * self.cols());
        let w = self.input[2];
        let ow = self.output[2];
        let sw = self.geom.stride[2];
        let pw = self.geom.padding[2];
        self.for_each_run(|col_off, in_off, kx| {
            let out = &mut col[col_off..col_off + ow];
            match in_off {
                None => out.fill(0.0),
                Some(base) => {
                    let (lo, hi) = valid_range(ow, w, kx, sw, pw);
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if sw == 1 {
                        let start = base + lo + kx - pw;
                        out[lo..hi].copy_from_slice(&input[start..start + (hi - lo)]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                            *o = input[base + ox * sw + kx - pw];
                        }
                    }
                }
            }
        });
    }

    pub fn col2im(&self, col: &[f64], input_grad: &mut [f64]) {
        debug_assert_eq!(input_grad.len(), self.input_len());
        debug_assert_eq!(col.len(), self.rows() * self.cols());
        let w = self.input[2];
        let ow = self.output[2];
        let sw = self.geom.stride[2];
        let pw = self.geom.padding[2];
        self.for_each_run(|col_off, in_off, kx| {
            if let Some(base) = in_off {
                let src = &col[col_off..col_off + ow];
                let (lo, hi) = valid_range(ow, w, kx, sw, pw);
                if sw == 1 {
                    let start = base + lo + kx - pw;
                    input_grad[start..start + (hi - lo)]
                        .iter_mut()
                        .zip(&src[lo..hi])
                        .for_each(|(g, s)| *g += s);
                } else {
                    for (ox, s) in src.iter().enumerate().take(hi).skip(lo) {
                        input_grad[base + ox * sw + kx - pw] += s;
                    }
                }
            }
        });
    }
}

/// Forward convolution. `input` is `[ci, d, h, w]`, `kernel` is
/// `[co, ci, kd, kh, kw]`. Returns the flat output and its spatial extents.
pub(crate) fn conv_forward(
    low: &Lowering,
    out_channels: usize,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let cols = low.cols();
    let rows = low.rows();
    let mut out = vec![0.0; out_channels * cols];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(cols).enumerate() {
            chunk.fill(b[oc]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if low.is_pointwise() {
        gemm(out_channels, rows, cols, kernel, false, input, false, &mut out, beta);
    } else if low.use_direct(out_channels) {
        low.for_each_segment(|row, o, i, n| {
            let src = &input[i..i + n];
            for oc in 0..out_channels {
                let w = kernel[oc * rows + row];
                let dst = &mut out[oc * cols + o..oc * cols + o + n];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        });
    } else {
        with_scratch(rows * cols, |col| {
            low.im2col(input, col);
            gemm(out_channels, rows, cols, kernel, false, col, false, &mut out, beta);
        });
    }
    out
}

/// Gradients of a forward convolution with respect to input and kernel.
pub(crate) fn conv_backward(
    low: &Lowering,
    out_channels: usize,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let cols = low.cols();
    let rows = low.rows();
    let pointwise = low.is_pointwise();
    if low.use_direct(out_channels) {
        let mut gk = need_kernel.then(|| vec![0.0; out_channels * rows]);
        let mut gi = need_input.then(|| vec![0.0; low.input_len()]);
        low.for_each_segment(|row, o, i, n| {
            for oc in 0..out_channels {
                let g = &grad_out[oc * cols + o..oc * cols + o + n];
                if let Some(gk) = gk.as_mut() {
                    gk[oc * rows + row] += g.iter().zip(&input[i..i + n]).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gi) = gi.as_mut() {
                    let w = kernel[oc * rows + row];
                    gi[i..i + n].iter_mut().zip(g).for_each(|(d, s)| *d += w * s);
                }
            }
        });
        return (gi, gk);
    }
    let mut grad_kernel = None;
    if need_kernel {
        // Computed as (col * grad_out^T)^T so the large operand streams by row.
        let mut gkt = vec![0.0; rows * out_channels];
        if pointwise {
            gemm(rows, cols, out_channels, input, false, grad_out, true, &mut gkt, 0.0);
        } else {
            with_scratch(rows * cols, |col| {
                low.im2col(input, col);
                gemm(rows, cols, out_channels, col, false, grad_out, true, &mut gkt, 0.0);
            });
        }
        let mut gk = vec![0.0; out_channels * rows];
        for r in 0..rows {
            for o in 0..out_channels {
                gk[o * rows + r] = gkt[r * out_channels + o];
            }
        }
        grad_kernel = Some(gk);
    }
    let mut grad_input = None;
    if need_input {
        if pointwise {
            let mut gi = vec![0.0; rows * cols];
            gemm(rows, out_channels, cols, kernel, true, grad_out, false, &mut gi, 0.0);
            grad_input = Some(gi);
        } else {
            let mut gi = vec![0.0; low.input_len()];
            with_scratch(rows * cols, |gcol| {
                gemm(rows, out_channels, cols, kernel, true, grad_out, false, gcol, 0.0);
                low.col2im(gcol, &mut gi);
            });
            grad_input = Some(gi);
        }
    }
    (grad_input, grad_kernel)
}

/// Per-channel sum of a `[channels, cols]` buffer.
pub(crate) fn channel_sums(grad_out: &[f64], channels: usize) -> Vec<f64> {
    let cols = grad_out.len() / channels;
    grad_out.chunks(cols).map(|c| c.iter().sum()).collect()
}

/// Transposed convolution: the adjoint of [`conv_forward`] without bias.
///
/// `low` describes the *forward* convolution that maps the transposed
/// output back onto `input`; its channel count is the transposed output
/// channel count. `kernel` is `[ci_t, co_t, kd, kh, kw]`.
pub(crate) fn conv_transpose_forward(
    low: &Lowering,
    in_channels: usize,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let rows = low.rows();
    let cols = low.cols();
    debug_assert_eq!(input.len(), in_channels * cols);
    let mut out = vec![0.0; low.input_len()];
    with_scratch(rows * cols, |gcol| {
        gemm(rows, in_channels, cols, kernel, true, input, false, gcol, 0.0);
        low.col2im(gcol, &mut out);
    });
    if let Some(b) = bias {
        let per = low.input.iter().product::<usize>();
        for (c, chunk) in out.chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[c]);
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    low: &Lowering,
    in_channels: usize,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = low.rows();
    let cols = low.cols();
    with_scratch(rows * cols, |col| {
        low.im2col(grad_out, col);
        let grad_input = need_input.then(|| {
            let mut gi = vec![0.0; in_channels * cols];
            gemm(in_channels, rows, cols, kernel, false, col, false, &mut gi, 0.0);
            gi
        });
        let grad_kernel = need_kernel.then(|| {
            let mut gk = vec![0.0; in_channels * rows];
            gemm(in_channels, cols, rows, input, false, col, true, &mut gk, 0.0);
            gk
        });
        (grad_input, grad_kernel)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_rules() {
        assert_eq!(conv_out_len(5, 3, 1, 1, 1).unwrap(), 5);
        assert_eq!(conv_out_len(8, 8, 4, 2, 0).unwrap(), 2);
        assert!(conv_out_len(6, 3, 2, 0, 1).unwrap_err().to_string().contains("height"));
        assert!(conv_out_len(1, 3, 1, 0, 2).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn valid_range_matches_scan() {
        for len in 1..7 {
            for k in 0..4 {
                for s in 1..4 {
                    for p in 0..3 {
                        let out_len = 9;
                        let (lo, hi) = valid_range(out_len, len, k, s, p);
                        for o in 0..out_len {
                            let ix = (o * s + k) as isize - p as isize;
                            let inside = ix >= 0 && ix < len as isize;
                            assert_eq!(inside, o >= lo && o < hi, "len={len} k={k} s={s} p={p} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
