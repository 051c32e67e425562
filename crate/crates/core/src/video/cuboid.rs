use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luma weights for converting RGB input to the single channel the network uses.
pub const BT601_LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel video viewed as a `(frames, rows, columns)` volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoCuboid {
    n_frames: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    value_max: f64,
}

impl VideoCuboid {
    pub fn new(
        n_frames: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        value_max: f64,
    ) -> Result<Self> {
        if n_frames == 0 || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "cuboid dimensions must be positive, got ({n_frames}, {height}, {width})"
            )));
        }
        let n = n_frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::contract("cuboid dimensions overflow"))?;
        if values.len() != n {
            return Err(Error::contract(format!(
                "cuboid ({n_frames}, {height}, {width}) needs {n} values, got {}",
                values.len()
            )));
        }
        if !(value_max > 0.0) {
            return Err(Error::contract("value_max must be positive"));
        }
        Ok(Self {
            n_frames,
            height,
            width,
            values,
            value_max,
        })
    }

    /// Builds an 8-bit-range cuboid from `f(t, y, x)`.
    pub fn from_fn(
        n_frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(n_frames * height * width);
        for t in 0..n_frames {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(t, y, x));
                }
            }
        }
        Self::new(n_frames, height, width, values, 255.0)
    }

    /// Converts interleaved RGB frames to luma.
    pub fn from_rgb(
        n_frames: usize,
        height: usize,
        width: usize,
        rgb: &[[f64; 3]],
        value_max: f64,
    ) -> Result<Self> {
        let values = rgb
            .iter()
            .map(|p| p.iter().zip(BT601_LUMA).map(|(c, w)| c * w).sum())
            .collect();
        Self::new(n_frames, height, width, values, value_max)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_frames, self.height, self.width)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value_max(&self) -> f64 {
        self.value_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(t, y, x)]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::new(&[self.height, self.width], self.frame(t).to_vec()).expect("frame shape")
    }

    /// Values clamped into `[0, value_max]`.
    pub fn clamped(mut self) -> Self {
        let max = self.value_max;
        self.values.iter_mut().for_each(|v| *v = v.clamp(0.0, max));
        self
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.values.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    /// `[N, H, W]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n_frames, self.height, self.width], self.values.clone())
            .expect("cuboid shape")
    }

    /// Accepts `[N, H, W]` or `[1, N, H, W]`.
    pub fn from_tensor(t: &Tensor, value_max: f64) -> Result<Self> {
        let s = t.shape();
        let (n, h, w) = match s {
            [n, h, w] => (*n, *h, *w),
            [1, n, h, w] => (*n, *h, *w),
            _ => {
                return Err(Error::contract(format!(
                    "cannot view tensor {s:?} as a cuboid"
                )))
            }
        };
        Self::new(n, h, w, t.data().to_vec(), value_max)
    }

    /// Sub-volume starting at `(t0, y0, x0)`.
    pub fn crop(
        &self,
        origin: (usize, usize, usize),
        extent: (usize, usize, usize),
    ) -> Result<Self> {
        let (t0, y0, x0) = origin;
        let (n, h, w) = extent;
        if t0 + n > self.n_frames || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::contract(format!(
                "crop ({n}, {h}, {w}) at ({t0}, {y0}, {x0}) exceeds cuboid {:?}",
                self.dims()
            )));
        }
        let mut values = Vec::with_capacity(n * h * w);
        for t in t0..t0 + n {
            for y in y0..y0 + h {
                let i = self.index(t, y, x0);
                values.extend_from_slice(&self.values[i..i + w]);
            }
        }
        Self::new(n, h, w, values, self.value_max)
    }
}

/// Which coordinate indexes the slices of a [`SliceSet`].
///
/// * `Time` (axis 1): one `(H, W)` slice per frame.
/// * `Width` (axis 2): one `(H, N)` slice per column, rows `y`, columns `t`.
/// * `Height` (axis 3): one `(W, N)` slice per row, rows `x`, columns `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SliceAxis {
    Time,
    Width,
    Height,
}

impl SliceAxis {
    pub const ALL: [SliceAxis; 3] = [SliceAxis::Time, SliceAxis::Width, SliceAxis::Height];

    pub fn from_index(m: u8) -> Result<Self> {
        match m {
            1 => Ok(SliceAxis::Time),
            2 => Ok(SliceAxis::Width),
            3 => Ok(SliceAxis::Height),
            _ => Err(Error::contract(format!(
                "slice axis must be 1, 2 or 3, got {m}"
            ))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            SliceAxis::Time => 1,
            SliceAxis::Width => 2,
            SliceAxis::Height => 3,
        }
    }

    /// `(count, rows, cols)` of the slices cut from an `(N, H, W)` cuboid.
    pub fn slice_geometry(self, dims: (usize, usize, usize)) -> (usize, usize, usize) {
        let (n, h, w) = dims;
        match self {
            SliceAxis::Time => (n, h, w),
            SliceAxis::Width => (w, h, n),
            SliceAxis::Height => (h, w, n),
        }
    }

    /// Cuboid coordinate `(t, y, x)` of pixel `(r, c)` in slice `s`.
    #[inline]
    pub fn source(self, s: usize, r: usize, c: usize) -> (usize, usize, usize) {
        match self {
            SliceAxis::Time => (s, r, c),
            SliceAxis::Width => (c, r, s),
            SliceAxis::Height => (c, s, r),
        }
    }
}

/// Row-major 2-D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("plane shape")
    }
}

/// Ordered slices of one cuboid along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSet {
    pub axis: SliceAxis,
    pub slices: Vec<Plane>,
    pub source_dims: (usize, usize, usize),
    pub value_max: f64,
}

/// Cuts `v` into slices along `axis`; values are copied unchanged.
pub fn slice(v: &VideoCuboid, axis: SliceAxis) -> SliceSet {
    let (count, rows, cols) = axis.slice_geometry(v.dims());
    let slices = (0..count)
        .map(|s| {
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let (t, y, x) = axis.source(s, r, c);
                    data.push(v.get(t, y, x));
                }
            }
            Plane { rows, cols, data }
        })
        .collect();
    SliceSet {
        axis,
        slices,
        source_dims: v.dims(),
        value_max: v.value_max(),
    }
}

/// Inverse of [`slice`].
pub fn reassemble(set: &SliceSet) -> Result<VideoCuboid> {
    let (count, rows, cols) = set.axis.slice_geometry(set.source_dims);
    if set.slices.len() != count {
        return Err(Error::contract(format!(
            "axis {} of a {:?} cuboid needs {count} slices, got {}",
            set.axis.index(),
            set.source_dims,
            set.slices.len()
        )));
    }
    let (n, h, w) = set.source_dims;
    let mut values = vec![0.0; n * h * w];
    for (s, plane) in set.slices.iter().enumerate() {
        if plane.rows != rows || plane.cols != cols || plane.data.len() != rows * cols {
            return Err(Error::contract(format!(
                "slice {s} is {}x{}, expected {rows}x{cols} for axis {}",
                plane.rows,
                plane.cols,
                set.axis.index()
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                let (t, y, x) = set.axis.source(s, r, c);
                values[(t * h + y) * w + x] = plane.get(r, c);
            }
        }
    }
    VideoCuboid::new(n, h, w, values, set.value_max)
}
