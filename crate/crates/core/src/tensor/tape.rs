//! Reverse-mode differentiation over a linear operation record.
//!
//! A [`Tape`] records every operation whose result depends on a tensor that
//! requires a gradient. Values flow through [`Var`] handles that share their
//! tensor with the tape; operations on constants are evaluated eagerly and
//! leave no record, so inference with a non-recording tape keeps only live
//! values in memory.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::array::strides;
use crate::tensor::conv::{self, ConvGeometry, Lowering};
use crate::tensor::resample::{axis_taps, resample_axis_raw, Alignment, SampleTaps};
use crate::tensor::Tensor;

static CONV2D_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: perturbs the kernel gradient of `conv2d` so that gradient
/// checks have a negative control. Never enabled outside self-tests.
#[doc(hidden)]
pub fn inject_conv2d_backward_fault(enabled: bool) {
    CONV2D_BACKWARD_FAULT.store(enabled, Ordering::SeqCst);
}

/// Handle to a value produced on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    /// True when gradients can flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = (*self.value).clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }
}

#[derive(Clone, Debug)]
struct Operand {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl From<&Var> for Operand {
    fn from(v: &Var) -> Self {
        Operand {
            id: v.id,
            value: Rc::clone(&v.value),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    LeakyRelu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Operand,
        kernel: Operand,
        bias: Option<usize>,
        low: Lowering,
        out_channels: usize,
        planar: bool,
    },
    ConvTranspose {
        input: Operand,
        kernel: Operand,
        bias: Option<usize>,
        low: Lowering,
        in_channels: usize,
    },
    Unary {
        kind: Unary,
        x: usize,
        /// Input for ReLU-family kinks, output for sigmoid.
        saved: Rc<Tensor>,
        slope: f64,
    },
    Prelu {
        x: Operand,
        alpha: Operand,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
        outer: usize,
        inner: usize,
    },
    Broadcast {
        a: Operand,
        b: Operand,
        mul: bool,
        /// `b` is subtracted instead of added.
        negate_b: bool,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Resample {
        x: usize,
        in_shape: Vec<usize>,
        axis: usize,
        taps: Vec<SampleTaps>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Narrow {
        x: usize,
        in_shape: Vec<usize>,
        axis: usize,
        start: usize,
    },
    Sum {
        x: usize,
        len: usize,
        mean: bool,
    },
    Mse {
        pred: Operand,
        target: Operand,
    },
    /// Average pooling when `argmax` is empty, max pooling otherwise.
    Pool {
        x: usize,
        in_len: usize,
        layout: PoolLayout,
        argmax: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
enum PoolLayout {
    /// [C, H, W] -> [C, 1, 1]
    OverSpace { channels: usize, plane: usize },
    /// [C, H, W] -> [1, H, W]
    OverChannels { channels: usize, plane: usize },
}

impl PoolLayout {
    fn cells(&self) -> usize {
        match *self {
            PoolLayout::OverSpace { channels, .. } => channels,
            PoolLayout::OverChannels { plane, .. } => plane,
        }
    }

    fn count(&self) -> usize {
        match *self {
            PoolLayout::OverSpace { plane, .. } => plane,
            PoolLayout::OverChannels { channels, .. } => channels,
        }
    }

    fn index(&self, cell: usize, k: usize) -> usize {
        match *self {
            PoolLayout::OverSpace { plane, .. } => cell * plane + k,
            PoolLayout::OverChannels { plane, .. } => k * plane + cell,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    len: usize,
}

/// Record of differentiable operations executed since creation.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&[f64]> {
        var.id
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when it does not reach the loss.
    pub fn get_or_zeros(&self, var: &Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.value.numel()])
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{op} produced a non-finite value")))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "{op}: rank mismatch between {a:?} and {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::contract(format!(
                    "{op}: axis {axis} extents {x} and {y} are incompatible ({a:?} vs {b:?})"
                )))
            }
        })
        .collect()
}

/// Flat index into an operand of shape `src` for each element of `out`.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            flat += eff[ax];
            if counter[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

impl Tape {
    /// A tape that records operations for a later [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every value is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            len: value.numel(),
        });
        Var {
            id: Some(id),
            value: Rc::new(value),
        }
    }

    fn constant_var(value: Tensor) -> Var {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// Emits `value` as tracked when any operand is tracked, else constant.
    fn emit(&self, tracked: bool, value: Tensor, op: impl FnOnce() -> Op) -> Var {
        if self.recording && tracked {
            self.push(op(), value)
        } else {
            Self::constant_var(value)
        }
    }

    /// Registers `t` as a leaf; it is tracked when `t.requires_grad` is set.
    pub fn leaf(&self, t: Tensor) -> Var {
        if self.recording && t.requires_grad {
            self.push(Op::Leaf, t)
        } else {
            Self::constant_var(t)
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Self::constant_var(t)
    }

    // ---- convolution ---------------------------------------------------

    fn check_bias(bias: Option<&Var>, channels: usize, op: &str) -> Result<()> {
        if let Some(b) = bias {
            if b.shape() != [channels] {
                return Err(Error::contract(format!(
                    "{op}: bias shape {:?} does not match {channels} output channels",
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &self,
        input: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 3 {
            return Err(Error::contract(format!(
                "conv2d: input must be [C_in, H, W], got {is:?}"
            )));
        }
        if ks.len() != 4 {
            return Err(Error::contract(format!(
                "conv2d: kernel must be [C_out, C_in, kh, kw], got {ks:?}"
            )));
        }
        if ks[1] != is[0] {
            return Err(Error::contract(format!(
                "conv2d: input channel dimension {} does not match kernel C_in {}",
                is[0], ks[1]
            )));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::contract(format!(
                "conv2d: kernel height/width must be odd, got {}x{}",
                ks[2], ks[3]
            )));
        }
        Self::check_bias(bias, ks[0], "conv2d")?;
        let low = Lowering::new(
            is[0],
            [1, is[1], is[2]],
            [1, ks[2], ks[3]],
            ConvGeometry::planar(stride, padding),
        )?;
        self.conv_impl(input, kernel, bias, low, ks[0], true)
    }

    /// 3-D cross-correlation of `[C_in, D, H, W]` with `[C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(
        &self,
        input: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 4 {
            return Err(Error::contract(format!(
                "conv3d: input must be [C_in, D, H, W], got {is:?}"
            )));
        }
        if ks.len() != 5 {
            return Err(Error::contract(format!(
                "conv3d: kernel must be [C_out, C_in, kd, kh, kw], got {ks:?}"
            )));
        }
        if ks[1] != is[0] {
            return Err(Error::contract(format!(
                "conv3d: input channel dimension {} does not match kernel C_in {}",
                is[0], ks[1]
            )));
        }
        Self::check_bias(bias, ks[0], "conv3d")?;
        let low = Lowering::new(
            is[0],
            [is[1], is[2], is[3]],
            [ks[2], ks[3], ks[4]],
            ConvGeometry { stride, padding },
        )?;
        self.conv_impl(input, kernel, bias, low, ks[0], false)
    }

    fn conv_impl(
        &self,
        input: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        low: Lowering,
        out_channels: usize,
        planar: bool,
    ) -> Result<Var> {
        let out = conv::conv_forward(
            &low,
            out_channels,
            input.data(),
            kernel.data(),
            bias.map(|b| b.data()),
        );
        let name = if planar { "conv2d" } else { "conv3d" };
        check_finite(name, &out)?;
        let shape: Vec<usize> = if planar {
            vec![out_channels, low.output[1], low.output[2]]
        } else {
            vec![out_channels, low.output[0], low.output[1], low.output[2]]
        };
        let value = Tensor::new(&shape, out)?;
        let tracked = input.id.is_some()
            || kernel.id.is_some()
            || bias.is_some_and(|b| b.id.is_some());
        Ok(self.emit(tracked, value, || Op::Conv {
            input: input.into(),
            kernel: kernel.into(),
            bias: bias.and_then(|b| b.id),
            low,
            out_channels,
            planar,
        }))
    }

    /// Transposed 3-D convolution; `kernel` is `[C_in, C_out, kd, kh, kw]`
    /// and `target` gives the output's spatial extents.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose3d(
        &self,
        input: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        stride: [usize; 3],
        padding: [usize; 3],
        target: [usize; 3],
    ) -> Result<Var> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 4 || ks.len() != 5 {
            return Err(Error::contract(format!(
                "conv_transpose3d: expected input [C_in, D, H, W] and kernel [C_in, C_out, kd, kh, kw], got {is:?} and {ks:?}"
            )));
        }
        if ks[0] != is[0] {
            return Err(Error::contract(format!(
                "conv_transpose3d: input channel dimension {} does not match kernel C_in {}",
                is[0], ks[0]
            )));
        }
        let out_channels = ks[1];
        Self::check_bias(bias, out_channels, "conv_transpose3d")?;
        let low = Lowering::new(
            out_channels,
            target,
            [ks[2], ks[3], ks[4]],
            ConvGeometry { stride, padding },
        )
        .map_err(|e| {
            Error::contract(format!(
                "conv_transpose3d: target {target:?} inconsistent with input {:?}: {e}",
                &is[1..]
            ))
        })?;
        if low.output != [is[1], is[2], is[3]] {
            let axis = (0..3).find(|&a| low.output[a] != is[a + 1]).unwrap_or(0);
            let expected = (is[axis + 1] as i64 - 1) * stride[axis] as i64
                - 2 * padding[axis] as i64
                + ks[axis + 2] as i64;
            return Err(Error::contract(format!(
                "conv_transpose3d: target {} extent {} is inconsistent with input extent {}; (L-1)*s - 2*pad + k = {expected}",
                ["depth", "height", "width"][axis],
                target[axis],
                is[axis + 1],
            )));
        }
        let out = conv::conv_transpose_forward(
            &low,
            is[0],
            input.data(),
            kernel.data(),
            bias.map(|b| b.data()),
        );
        check_finite("conv_transpose3d", &out)?;
        let value = Tensor::new(&[out_channels, target[0], target[1], target[2]], out)?;
        let tracked = input.id.is_some()
            || kernel.id.is_some()
            || bias.is_some_and(|b| b.id.is_some());
        Ok(self.emit(tracked, value, || Op::ConvTranspose {
            input: input.into(),
            kernel: kernel.into(),
            bias: bias.and_then(|b| b.id),
            low,
            in_channels: is[0],
        }))
    }

    // ---- elementwise ---------------------------------------------------

    fn unary(&self, x: &Var, kind: Unary, slope: f64) -> Result<Var> {
        let data: Vec<f64> = match kind {
            Unary::Relu => x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Unary::LeakyRelu => x
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
            Unary::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let name = match kind {
            Unary::Relu => "relu",
            Unary::LeakyRelu => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
        };
        check_finite(name, &data)?;
        let value = Tensor::new(x.shape(), data)?;
        if !(self.recording && x.id.is_some()) {
            return Ok(Self::constant_var(value));
        }
        let value = Rc::new(value);
        let saved = match kind {
            Unary::Sigmoid => Rc::clone(&value),
            _ => Rc::clone(&x.value),
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Unary {
                kind,
                x: x.id.expect("tracked"),
                saved,
                slope,
            },
            len: value.numel(),
        });
        Ok(Var {
            id: Some(id),
            value,
        })
    }

    pub fn relu(&self, x: &Var) -> Result<Var> {
        self.unary(x, Unary::Relu, 0.0)
    }

    pub fn leaky_relu(&self, x: &Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu, slope)
    }

    pub fn sigmoid(&self, x: &Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, 0.0)
    }

    /// Channel-wise parametric ReLU; `alpha` has one slope per leading-axis channel.
    pub fn prelu(&self, x: &Var, alpha: &Var) -> Result<Var> {
        let c = x.shape()[0];
        if alpha.shape() != [c] {
            return Err(Error::contract(format!(
                "prelu: alpha shape {:?} does not match {c} channels of {:?}",
                alpha.shape(),
                x.shape()
            )));
        }
        let per = x.value.numel() / c;
        let a = alpha.data();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[i / per] * v })
            .collect();
        check_finite("prelu", &data)?;
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.emit(x.id.is_some() || alpha.id.is_some(), value, || Op::Prelu {
            x: x.into(),
            alpha: alpha.into(),
        }))
    }

    fn broadcast(&self, a: &Var, b: &Var, mul: bool, negate_b: bool, name: &str) -> Result<Var> {
        let out_shape = broadcast_shape(a.shape(), b.shape(), name)?;
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| combine(x, y, mul, negate_b))
                .collect()
        } else {
            let ia = broadcast_index(&out_shape, a.shape());
            let ib = broadcast_index(&out_shape, b.shape());
            let (ad, bd) = (a.data(), b.data());
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| combine(ad[i], bd[j], mul, negate_b))
                .collect()
        };
        check_finite(name, &data)?;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.emit(a.id.is_some() || b.id.is_some(), value, || Op::Broadcast {
            a: a.into(),
            b: b.into(),
            mul,
            negate_b,
        }))
    }

    /// Elementwise sum; an operand may have extent 1 on any axis.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.broadcast(a, b, false, false, "add")
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.broadcast(a, b, false, true, "sub")
    }

    /// Elementwise product; an operand may have extent 1 on any axis.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.broadcast(a, b, true, false, "multiply")
    }

    pub fn scale(&self, x: &Var, factor: f64) -> Result<Var> {
        let data: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &data)?;
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.emit(x.id.is_some(), value, || Op::Scale {
            x: x.id.expect("tracked"),
            factor,
        }))
    }

    /// Differentiable bicubic resample of one axis (see [`resample_axis`]).
    ///
    /// [`resample_axis`]: crate::tensor::resample_axis
    pub fn resample_axis(&self, x: &Var, axis: usize, out_len: usize, align: Alignment) -> Result<Var> {
        let in_shape = x.shape().to_vec();
        if axis >= in_shape.len() || out_len == 0 {
            return Err(Error::contract(format!(
                "resample: axis {axis} / extent {out_len} invalid for shape {in_shape:?}"
            )));
        }
        let data = resample_axis_raw(x.data(), &in_shape, axis, out_len, align);
        let mut shape = in_shape.clone();
        shape[axis] = out_len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.emit(x.id.is_some(), value, || Op::Resample {
            x: x.id.expect("tracked"),
            taps: axis_taps(in_shape[axis], out_len, align),
            in_shape,
            axis,
        }))
    }

    // ---- layout --------------------------------------------------------

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat: no tensors given"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::contract(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::contract(format!(
                    "concat: shape {s:?} does not match {:?} off axis {axis}",
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let value = Tensor::new(&shape, data)?;
        let tracked = parts.iter().any(|p| p.id.is_some());
        Ok(self.emit(tracked, value, || Op::Concat {
            parts: parts.iter().map(|p| (p.id, p.shape()[axis])).collect(),
            outer,
            inner,
        }))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = x.value.as_ref().clone().reshape(shape)?;
        Ok(self.emit(x.id.is_some(), value, || Op::Reshape {
            x: x.id.expect("tracked"),
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: &Var, perm: &[usize]) -> Result<Var> {
        let in_shape = x.shape().to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "permute: {perm:?} is not a permutation of {rank} axes"
            )));
        }
        let data = permute_raw(x.data(), &in_shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.emit(x.id.is_some(), value, || Op::Permute {
            x: x.id.expect("tracked"),
            in_shape,
            perm: perm.to_vec(),
        }))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = x.shape().to_vec();
        if axis >= in_shape.len() || len == 0 || start + len > in_shape[axis] {
            return Err(Error::contract(format!(
                "narrow: range {start}..{} invalid on axis {axis} of {in_shape:?}",
                start + len
            )));
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.emit(x.id.is_some(), value, || Op::Narrow {
            x: x.id.expect("tracked"),
            in_shape,
            axis,
            start,
        }))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&self, x: &Var) -> Result<Var> {
        self.reduce(x, false)
    }

    pub fn mean(&self, x: &Var) -> Result<Var> {
        self.reduce(x, true)
    }

    fn reduce(&self, x: &Var, mean: bool) -> Result<Var> {
        let len = x.value.numel();
        let mut s: f64 = x.data().iter().sum();
        if mean {
            s /= len as f64;
        }
        check_finite(if mean { "mean" } else { "sum" }, &[s])?;
        Ok(self.emit(x.id.is_some(), Tensor::scalar(s), || Op::Sum {
            x: x.id.expect("tracked"),
            len,
            mean,
        }))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, pred: &Var, target: &Var) -> Result<Var> {
        if pred.shape() != target.shape() {
            return Err(Error::contract(format!(
                "l2 loss: prediction shape {:?} does not match target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.value.numel() as f64;
        let s: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        check_finite("l2 loss", &[s])?;
        Ok(self.emit(
            pred.id.is_some() || target.id.is_some(),
            Tensor::scalar(s),
            || Op::Mse {
                pred: pred.into(),
                target: target.into(),
            },
        ))
    }

    fn pool(&self, x: &Var, layout: PoolLayout, out_shape: Vec<usize>, max: bool) -> Result<Var> {
        let d = x.data();
        let count = layout.count();
        let mut out = Vec::with_capacity(layout.cells());
        let mut argmax = Vec::new();
        for cell in 0..layout.cells() {
            if max {
                let mut best = layout.index(cell, 0);
                for k in 1..count {
                    let i = layout.index(cell, k);
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                argmax.push(best);
                out.push(d[best]);
            } else {
                let s: f64 = (0..count).map(|k| d[layout.index(cell, k)]).sum();
                out.push(s / count as f64);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let in_len = x.value.numel();
        Ok(self.emit(x.id.is_some(), value, || Op::Pool {
            x: x.id.expect("tracked"),
            in_len,
            layout,
            argmax,
        }))
    }

    fn chw(x: &Var, op: &str) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::contract(format!(
                "{op}: expected [C, H, W], got {s:?}"
            )));
        }
        Ok((s[0], s[1] * s[2]))
    }

    /// Global average and max over the spatial axes, each shaped `[C, 1, 1]`
    /// so they broadcast against the map.
    pub fn pool_channel_stats(&self, x: &Var) -> Result<(Var, Var)> {
        let (channels, plane) = Self::chw(x, "pool_channel_stats")?;
        let layout = PoolLayout::OverSpace { channels, plane };
        Ok((
            self.pool(x, layout, vec![channels, 1, 1], false)?,
            self.pool(x, layout, vec![channels, 1, 1], true)?,
        ))
    }

    /// Average and max across channels, each shaped `[1, H, W]`.
    pub fn pool_spatial_stats(&self, x: &Var) -> Result<(Var, Var)> {
        let (channels, plane) = Self::chw(x, "pool_spatial_stats")?;
        let s = x.shape();
        let layout = PoolLayout::OverChannels { channels, plane };
        Ok((
            self.pool(x, layout, vec![1, s[1], s[2]], false)?,
            self.pool(x, layout, vec![1, s[1], s[2]], true)?,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a one-element `loss` and clears the tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            debug_assert_eq!(g.len(), node.len);
            propagate(&node.op, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn combine(x: f64, y: f64, mul: bool, negate_b: bool) -> f64 {
    if mul {
        x * y
    } else if negate_b {
        x - y
    } else {
        x + y
    }
}

pub(crate) fn permute_raw(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    broadcast_gather(data, &out_shape, &src_strides)
}

fn broadcast_gather(data: &[f64], out_shape: &[usize], src_strides: &[usize]) -> Vec<f64> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(data[flat]);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            flat += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            flat -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

fn reduce_to(g: &[f64], out_shape: &[usize], src_shape: &[usize]) -> Vec<f64> {
    if out_shape == src_shape {
        return g.to_vec();
    }
    let idx = broadcast_index(out_shape, src_shape);
    let mut r = vec![0.0; src_shape.iter().product()];
    for (gi, &i) in g.iter().zip(&idx) {
        r[i] += gi;
    }
    r
}

fn propagate(op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Conv {
            input,
            kernel,
            bias,
            low,
            out_channels,
            planar,
        } => {
            let (gi, gk) = conv::conv_backward(
                low,
                *out_channels,
                input.value.data(),
                kernel.value.data(),
                g,
                input.id.is_some(),
                kernel.id.is_some(),
            );
            if let (Some(id), Some(gi)) = (input.id, gi) {
                accumulate(&mut grads[id], &gi);
            }
            if let (Some(id), Some(mut gk)) = (kernel.id, gk) {
                if *planar && CONV2D_BACKWARD_FAULT.load(Ordering::SeqCst) {
                    gk.iter_mut().for_each(|v| *v *= 1.01);
                }
                accumulate(&mut grads[id], &gk);
            }
            if let Some(id) = bias {
                accumulate(&mut grads[*id], &conv::channel_sums(g, *out_channels));
            }
        }
        Op::ConvTranspose {
            input,
            kernel,
            bias,
            low,
            in_channels,
        } => {
            let (gi, gk) = conv::conv_transpose_backward(
                low,
                *in_channels,
                input.value.data(),
                kernel.value.data(),
                g,
                input.id.is_some(),
                kernel.id.is_some(),
            );
            if let (Some(id), Some(gi)) = (input.id, gi) {
                accumulate(&mut grads[id], &gi);
            }
            if let (Some(id), Some(gk)) = (kernel.id, gk) {
                accumulate(&mut grads[id], &gk);
            }
            if let Some(id) = bias {
                accumulate(&mut grads[*id], &conv::channel_sums(g, low.channels));
            }
        }
        Op::Unary {
            kind,
            x,
            saved,
            slope,
        } => {
            let s = saved.data();
            let gx: Vec<f64> = match kind {
                Unary::Relu => g
                    .iter()
                    .zip(s)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                Unary::LeakyRelu => g
                    .iter()
                    .zip(s)
                    .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
                    .collect(),
                Unary::Sigmoid => g.iter().zip(s).map(|(&g, &y)| g * y * (1.0 - y)).collect(),
            };
            accumulate(&mut grads[*x], &gx);
        }
        Op::Prelu { x, alpha } => {
            let c = alpha.value.numel();
            let per = x.value.numel() / c;
            let xd = x.value.data();
            let a = alpha.value.data();
            if let Some(id) = x.id {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .enumerate()
                    .map(|(i, (&g, &v))| if v > 0.0 { g } else { a[i / per] * g })
                    .collect();
                accumulate(&mut grads[id], &gx);
            }
            if let Some(id) = alpha.id {
                let mut ga = vec![0.0; c];
                for (i, (&g, &v)) in g.iter().zip(xd).enumerate() {
                    if v <= 0.0 {
                        ga[i / per] += g * v;
                    }
                }
                accumulate(&mut grads[id], &ga);
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
        } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, len) in parts {
                if let Some(id) = id {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(&mut grads[id], &gp);
                }
                offset += len;
            }
        }
        Op::Broadcast {
            a,
            b,
            mul,
            negate_b,
        } => {
            let out_shape = broadcast_shape(a.value.shape(), b.value.shape(), "broadcast")?;
            if let Some(id) = a.id {
                let ga: Vec<f64> = if *mul {
                    let ib = broadcast_index(&out_shape, b.value.shape());
                    let bd = b.value.data();
                    g.iter().zip(&ib).map(|(g, &j)| g * bd[j]).collect()
                } else {
                    g.to_vec()
                };
                accumulate(&mut grads[id], &reduce_to(&ga, &out_shape, a.value.shape()));
            }
            if let Some(id) = b.id {
                let gb: Vec<f64> = if *mul {
                    let ia = broadcast_index(&out_shape, a.value.shape());
                    let ad = a.value.data();
                    g.iter().zip(&ia).map(|(g, &i)| g * ad[i]).collect()
                } else if *negate_b {
                    g.iter().map(|v| -v).collect()
                } else {
                    g.to_vec()
                };
                accumulate(&mut grads[id], &reduce_to(&gb, &out_shape, b.value.shape()));
            }
        }
        Op::Scale { x, factor } => {
            let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
            accumulate(&mut grads[*x], &gx);
        }
        Op::Resample {
            x,
            in_shape,
            axis,
            taps,
        } => {
            let outer: usize = in_shape[..*axis].iter().product();
            let len = in_shape[*axis];
            let inner: usize = in_shape[axis + 1..].iter().product();
            let out_len = taps.len();
            let mut gx = vec![0.0; outer * len * inner];
            if out_len == len {
                gx.copy_from_slice(g);
            } else {
                for o in 0..outer {
                    for (d, st) in taps.iter().enumerate() {
                        let gd = &g[(o * out_len + d) * inner..(o * out_len + d + 1) * inner];
                        let mut anchor_w = 1.0;
                        for &(i, w) in &st.taps {
                            if i == st.anchor {
                                continue;
                            }
                            anchor_w -= w;
                            let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                            dst.iter_mut().zip(gd).for_each(|(a, b)| *a += w * b);
                        }
                        let a = st.anchor;
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        dst.iter_mut().zip(gd).for_each(|(x, b)| *x += anchor_w * b);
                    }
                }
            }
            accumulate(&mut grads[*x], &gx);
        }
        Op::Reshape { x } => accumulate(&mut grads[*x], g),
        Op::Permute { x, in_shape, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            accumulate(&mut grads[*x], &permute_raw(g, &out_shape, &inverse));
        }
        Op::Narrow {
            x,
            in_shape,
            axis,
            start,
        } => {
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = g.len() / (outer * inner);
            let mut gx = vec![0.0; in_shape.iter().product()];
            for o in 0..outer {
                let base = (o * in_shape[*axis] + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(&mut grads[*x], &gx);
        }
        Op::Sum { x, len, mean } => {
            let v = if *mean { g[0] / *len as f64 } else { g[0] };
            accumulate(&mut grads[*x], &vec![v; *len]);
        }
        Op::Mse { pred, target } => {
            let n = pred.value.numel() as f64;
            let scale = 2.0 * g[0] / n;
            let diff: Vec<f64> = pred
                .value
                .data()
                .iter()
                .zip(target.value.data())
                .map(|(p, t)| scale * (p - t))
                .collect();
            if let Some(id) = pred.id {
                accumulate(&mut grads[id], &diff);
            }
            if let Some(id) = target.id {
                let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                accumulate(&mut grads[id], &neg);
            }
        }
        Op::Pool {
            x,
            in_len,
            layout,
            argmax,
        } => {
            let mut gx = vec![0.0; *in_len];
            if argmax.is_empty() {
                let count = layout.count();
                for (cell, &gc) in g.iter().enumerate() {
                    let v = gc / count as f64;
                    for k in 0..count {
                        gx[layout.index(cell, k)] += v;
                    }
                }
            } else {
                for (&gc, &i) in g.iter().zip(argmax) {
                    gx[i] += gc;
                }
            }
            accumulate(&mut grads[*x], &gx);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let loss = tape.sum(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0; 4]);
        assert!(tape.is_empty());
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], vec![1.0, -2.0, 3.5]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_tape_backward_is_noop() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(&c).unwrap();
        assert!(g.get(&c).is_none());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = leaf(&tape, &[2], vec![1.0, 2.0]);
        let y = tape.relu(&x).unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn activations_pointwise() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 2.0, -10.0]).unwrap());
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 2.0, 0.0]);
        let l = tape.leaky_relu(&x, 0.01).unwrap();
        assert!((l.data()[2] + 0.1).abs() < 1e-15);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.sigmoid(&z).unwrap().data(), &[0.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], vec![0.0, 1.0]);
        let y = tape.relu(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_shapes() {
        let tape = Tape::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::full(&[2, 3], 1.0));
        assert_eq!(tape.concat(&[&a, &b], 0).unwrap().shape(), &[4, 3]);
        assert_eq!(tape.concat(&[&a, &b], 1).unwrap().shape(), &[2, 6]);
        let c = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[&a, &c], 1).is_err());
    }

    #[test]
    fn add_zeros_is_identity() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(tape.add(&x, &z).unwrap().data(), x.data());
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.add(&x, &bad).is_err());
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]);
        let (_, max) = tape.pool_channel_stats(&x).unwrap();
        let loss = tape.sum(&max).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooled_stats_of_constant() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[3, 4, 5], 2.5));
        let (a, m) = tape.pool_channel_stats(&x).unwrap();
        assert_eq!(a.shape(), &[3, 1, 1]);
        assert!(a.data().iter().chain(m.data()).all(|&v| v == 2.5));
        let (a, m) = tape.pool_spatial_stats(&x).unwrap();
        assert_eq!(a.shape(), &[1, 4, 5]);
        assert!(a.data().iter().chain(m.data()).all(|&v| v == 2.5));
    }

    #[test]
    fn single_peak_channel_max() {
        let tape = Tape::inference();
        let mut data = vec![0.0; 2 * 3 * 3];
        data[9 + 4] = 5.0;
        let x = tape.constant(Tensor::new(&[2, 3, 3], data).unwrap());
        let (_, m) = tape.pool_channel_stats(&x).unwrap();
        assert_eq!(m.data(), &[0.0, 5.0]);
    }

    #[test]
    fn permute_and_back() {
        let tape = Tape::inference();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 4], data).unwrap());
        let p = tape.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        let back = tape.permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(tape.permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_selects_range() {
        let tape = Tape::inference();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = tape.constant(Tensor::new(&[3, 4], data).unwrap());
        let n = tape.narrow(&x, 1, 1, 2).unwrap();
        assert_eq!(n.data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0]);
        assert!(tape.narrow(&x, 0, 2, 2).is_err());
    }

    #[test]
    fn mse_value_and_shape_check() {
        let tape = Tape::inference();
        let p = tape.constant(Tensor::full(&[2, 3], 5.0));
        let t = tape.constant(Tensor::full(&[2, 3], 3.0));
        assert_eq!(tape.mse(&p, &t).unwrap().data(), &[4.0]);
        assert_eq!(tape.mse(&p, &p).unwrap().data(), &[0.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.mse(&p, &bad).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[2], 1e300));
        assert!(matches!(tape.mul(&x, &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv2d_names_bad_dimension() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[2, 5, 5]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(&x, &k, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
        let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let x = tape.constant(Tensor::zeros(&[2, 6, 5]));
        let err = tape.conv2d(&x, &k, None, 2, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }
}
