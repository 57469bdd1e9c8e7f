//! Rank-4 `f32` tensors in N×C×H×W layout and the kernels that operate on them.
//!
//! Every kernel has an optimized implementation in [`ops`] and a direct,
//! loop-per-definition implementation in [`reference`] that the optimized
//! paths are tested against.

pub mod ops;
pub mod reference;

use std::fmt;
use std::ops::Range;

use crate::error::{bail, Error, Result};

pub use ops::{
    add, argmax_channels, batchnorm_infer, concat_channels, conv2d, elementwise, maxpool2d, relu,
    upsample, Elementwise,
};

/// Extents of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one H×W plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub const fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

/// Contiguous row-major (n, c, h, w) buffer of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: Dims) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            bail!(
                ShapeMismatch,
                "buffer of {} elements for dims {}",
                data.len(),
                dims
            );
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// One H×W plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    /// Copy of channels `range` of every batch item.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        if range.start > range.end || range.end > self.dims.c {
            bail!(
                InvalidInput,
                "channel range {:?} out of bounds for {}",
                range,
                self.dims
            );
        }
        let dims = self.dims.with_channels(range.len());
        let p = self.dims.plane();
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..self.dims.n {
            let base = n * self.dims.c * p;
            data.extend_from_slice(&self.data[base + range.start * p..base + range.end * p]);
        }
        Ok(Tensor { dims, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Re-dimension in place, reusing the allocation. Contents are unspecified
    /// afterwards; callers overwrite every element.
    pub(crate) fn reset(&mut self, dims: Dims) {
        self.dims = dims;
        self.data.resize(dims.len(), 0.0);
    }
}

/// Zero-padded 2-D convolution geometry. Dilation and grouping are always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvParams {
    /// Square kernel, stride and padding, no bias.
    pub const fn square(k: usize, s: usize, p: usize) -> Self {
        ConvParams {
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            has_bias: false,
        }
    }

    pub const fn with_bias(self, has_bias: bool) -> Self {
        ConvParams { has_bias, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            bail!(
                InvalidInput,
                "kernel size must be positive, got {:?}",
                self.kernel
            );
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            bail!(
                InvalidInput,
                "stride must be positive, got {:?}",
                self.stride
            );
        }
        Ok(())
    }

    /// Output (h, w) for an input of (h, w), or an error when the window does
    /// not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let oh = window_out_len(h, self.kernel.0, self.stride.0, self.padding.0);
        let ow = window_out_len(w, self.kernel.1, self.stride.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => bail!(
                ShapeMismatch,
                "kernel {:?} with padding {:?} does not fit a {}x{} input",
                self.kernel,
                self.padding,
                h,
                w
            ),
        }
    }
}

/// `⌊(len + 2p − k)/s⌋ + 1`, or `None` when that is not a positive length.
pub fn window_out_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = len + 2 * p;
    if len == 0 || s == 0 || padded < k {
        None
    } else {
        Some((padded - k) / s + 1)
    }
}

/// Borrowed convolution weights laid out as `[cout, cin, kh, kw]`.
#[derive(Debug, Clone, Copy)]
pub struct Filter<'a> {
    pub data: &'a [f32],
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl<'a> Filter<'a> {
    pub fn new(data: &'a [f32], dims: [usize; 4]) -> Result<Self> {
        let [out_channels, in_channels, kh, kw] = dims;
        if data.len() != out_channels * in_channels * kh * kw {
            bail!(
                ShapeMismatch,
                "filter buffer of {} elements for dims {:?}",
                data.len(),
                dims
            );
        }
        Ok(Filter {
            data,
            out_channels,
            in_channels,
            kh,
            kw,
        })
    }

    pub fn from_tensor(t: &'a Tensor) -> Self {
        let d = t.dims();
        Filter {
            data: t.data(),
            out_channels: d.n,
            in_channels: d.c,
            kh: d.h,
            kw: d.w,
        }
    }

    /// Taps per output channel.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }
}

/// Interpolation used by [`upsample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers (`align_corners = false`), borders clamped.
    Bilinear,
}

impl UpsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        }
    }
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => bail!(InvalidInput, "unknown upsample mode `{other}`"),
        }
    }
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-pixel class labels, `n × h × w`. Label 255 marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub const IGNORE: u8 = 255;

    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            bail!(
                ShapeMismatch,
                "class map buffer of {} for {}x{}",
                data.len(),
                h,
                w
            );
        }
        Ok(ClassMap { n: 1, h, w, data })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        ClassMap {
            n: 1,
            h,
            w,
            data: vec![label; h * w],
        }
    }

    /// Labels of batch item `n`.
    pub fn item(&self, n: usize) -> &[u8] {
        let p = self.h * self.w;
        &self.data[n * p..(n + 1) * p]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }
}
