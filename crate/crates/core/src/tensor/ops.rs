//! Optimized kernels.
//!
//! Convolution lowers row bands of the output to im2col panels multiplied by
//! the filter matrix. Band boundaries depend only on the problem shape, and
//! each output value is produced by exactly one GEMM call, so results do not
//! depend on how many threads rayon runs.
//!
//! The `*_into` variants write into a caller-owned tensor so that an
//! inference session can recycle activation buffers.

use rayon::prelude::*;

use super::{ClassMap, ConvParams, Dims, Filter, Tensor, UpsampleMode};
use crate::error::{bail, Result};

/// Target size, in elements, of one im2col panel.
const PANEL_ELEMS: usize = 1 << 18;

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<Tensor> {
    let mut out = Tensor::default();
    conv2d_into(input, Filter::from_tensor(weight), bias, params, &mut out)?;
    Ok(out)
}

pub(crate) fn check_conv(
    input: Dims,
    filter: &Filter<'_>,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<Dims> {
    params.validate()?;
    if filter.in_channels != input.c {
        bail!(
            ShapeMismatch,
            "conv expects {} input channels, got {}",
            filter.in_channels,
            input.c
        );
    }
    if (filter.kh, filter.kw) != params.kernel {
        bail!(
            ShapeMismatch,
            "filter is {}x{} but params declare {:?}",
            filter.kh,
            filter.kw,
            params.kernel
        );
    }
    if filter.data.len() != filter.out_channels * filter.fan_in() {
        bail!(ShapeMismatch, "filter buffer length {}", filter.data.len());
    }
    if bias.is_some() != params.has_bias {
        bail!(
            InvalidInput,
            "bias presence ({}) disagrees with params.has_bias ({})",
            bias.is_some(),
            params.has_bias
        );
    }
    if let Some(b) = bias {
        if b.len() != filter.out_channels {
            bail!(
                ShapeMismatch,
                "bias has {} entries for {} output channels",
                b.len(),
                filter.out_channels
            );
        }
        if !b.iter().all(|v| v.is_finite()) {
            bail!(InvalidInput, "non-finite conv bias");
        }
    }
    if !filter.data.iter().all(|v| v.is_finite()) {
        bail!(InvalidInput, "non-finite conv weights");
    }
    let (oh, ow) = params.output_hw(input.h, input.w)?;
    Ok(Dims::new(input.n, filter.out_channels, oh, ow))
}

pub fn conv2d_into(
    input: &Tensor,
    filter: Filter<'_>,
    bias: Option<&[f32]>,
    params: &ConvParams,
    out: &mut Tensor,
) -> Result<()> {
    let in_dims = input.dims();
    let out_dims = check_conv(in_dims, &filter, bias, params)?;
    out.reset(out_dims);

    let cout = out_dims.c;
    let (oh, ow) = (out_dims.h, out_dims.w);
    let k = filter.fan_in();
    let rows_per_band = (PANEL_ELEMS / (k * ow)).clamp(1, oh);
    let bands: Vec<(usize, usize)> = (0..oh)
        .step_by(rows_per_band)
        .map(|r0| (r0, (r0 + rows_per_band).min(oh)))
        .collect();

    let in_image = in_dims.c * in_dims.plane();
    let out_image = out_dims.c * out_dims.plane();
    for n in 0..in_dims.n {
        let x = &input.data()[n * in_image..(n + 1) * in_image];
        let panels: Vec<Vec<f32>> = bands
            .par_iter()
            .map(|&(r0, r1)| {
                let cols = (r1 - r0) * ow;
                let mut col = vec![0.0f32; k * cols];
                im2col(x, in_dims, &filter, params, r0, r1, ow, &mut col);
                let mut panel = vec![0.0f32; cout * cols];
                // SAFETY: `filter.data` is cout×k, `col` is k×cols and `panel`
                // is cout×cols, all dense row-major with the strides given.
                unsafe {
                    matrixmultiply::sgemm(
                        cout,
                        k,
                        cols,
                        1.0,
                        filter.data.as_ptr(),
                        k as isize,
                        1,
                        col.as_ptr(),
                        cols as isize,
                        1,
                        0.0,
                        panel.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                panel
            })
            .collect();

        let y = &mut out.data_mut()[n * out_image..(n + 1) * out_image];
        y.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(co, plane)| {
                for (&(r0, r1), panel) in bands.iter().zip(&panels) {
                    let cols = (r1 - r0) * ow;
                    plane[r0 * ow..r1 * ow].copy_from_slice(&panel[co * cols..(co + 1) * cols]);
                }
                if let Some(b) = bias {
                    let b = b[co];
                    plane.iter_mut().for_each(|v| *v += b);
                }
            });
    }
    Ok(())
}

/// Gathers output rows `r0..r1` into a `(cin·kh·kw) × ((r1−r0)·ow)` panel.
/// Row order of the panel is (ci, ky, kx), matching the filter layout.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    in_dims: Dims,
    filter: &Filter<'_>,
    params: &ConvParams,
    r0: usize,
    r1: usize,
    ow: usize,
    col: &mut [f32],
) {
    let (h, w) = (in_dims.h as isize, in_dims.w as isize);
    let (sh, sw) = (params.stride.0 as isize, params.stride.1 as isize);
    let (ph, pw) = (params.padding.0 as isize, params.padding.1 as isize);
    let cols = (r1 - r0) * ow;
    let mut row = 0;
    for ci in 0..filter.in_channels {
        let plane = &x[ci * in_dims.plane()..(ci + 1) * in_dims.plane()];
        for ky in 0..filter.kh as isize {
            for kx in 0..filter.kw as isize {
                let dst = &mut col[row * cols..(row + 1) * cols];
                // valid ox satisfy 0 <= ox*sw + kx - pw < w
                let lo = if pw > kx { (pw - kx + sw - 1) / sw } else { 0 };
                let hi = if w + pw - kx > 0 {
                    ((w + pw - kx - 1) / sw + 1).min(ow as isize)
                } else {
                    0
                };
                for (i, oy) in (r0..r1).enumerate() {
                    let seg = &mut dst[i * ow..(i + 1) * ow];
                    let iy = oy as isize * sh + ky - ph;
                    if iy < 0 || iy >= h || lo >= hi {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    seg[..lo as usize].fill(0.0);
                    if sw == 1 {
                        let start = (lo + kx - pw) as usize;
                        seg[lo as usize..hi as usize]
                            .copy_from_slice(&src[start..start + (hi - lo) as usize]);
                    } else {
                        for ox in lo..hi {
                            seg[ox as usize] = src[(ox * sw + kx - pw) as usize];
                        }
                    }
                    seg[hi as usize..].fill(0.0);
                }
                row += 1;
            }
        }
    }
}

/// Inference-mode batch normalization,
/// `y = gamma·(x − mean)/√(var + eps) + beta` per channel.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let mut out = Tensor::default();
    batchnorm_into(input, [gamma, beta, mean, var], eps, &mut out)?;
    Ok(out)
}

/// Per-channel `(scale, shift)` so that `y = x·scale + shift`.
pub(crate) fn batchnorm_affine(stats: [&[f32]; 4], eps: f32) -> Result<Vec<(f32, f32)>> {
    let [gamma, beta, mean, var] = stats;
    let c = gamma.len();
    if beta.len() != c || mean.len() != c || var.len() != c {
        bail!(
            ShapeMismatch,
            "batch norm vectors have lengths {}/{}/{}/{}",
            gamma.len(),
            beta.len(),
            mean.len(),
            var.len()
        );
    }
    (0..c)
        .map(|i| {
            if var[i] < 0.0 || var[i].is_nan() {
                bail!(
                    InvalidInput,
                    "negative variance {} in channel {}",
                    var[i],
                    i
                );
            }
            let denom = (var[i] + eps).sqrt();
            if denom == 0.0 {
                bail!(InvalidInput, "var + eps is zero in channel {}", i);
            }
            let scale = gamma[i] / denom;
            Ok((scale, beta[i] - mean[i] * scale))
        })
        .collect()
}

pub(crate) fn batchnorm_into(
    input: &Tensor,
    stats: [&[f32]; 4],
    eps: f32,
    out: &mut Tensor,
) -> Result<()> {
    let dims = input.dims();
    if stats[0].len() != dims.c {
        bail!(
            ShapeMismatch,
            "batch norm has {} channels, input has {}",
            stats[0].len(),
            dims.c
        );
    }
    let affine = batchnorm_affine(stats, eps)?;
    let mean = stats[2];
    let beta = stats[1];
    out.reset(dims);
    let p = dims.plane().max(1);
    out.data_mut()
        .par_chunks_mut(p)
        .zip(input.data().par_chunks(p))
        .enumerate()
        .for_each(|(i, (y, x))| {
            let c = i % dims.c;
            let (scale, mu, shift) = (affine[c].0, mean[c], beta[c]);
            for (o, &v) in y.iter_mut().zip(x) {
                *o = (v - mu) * scale + shift;
            }
        });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Add,
}

pub fn elementwise(kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (kind, b) {
        (Elementwise::Relu, None) => Ok(relu(a)),
        (Elementwise::Relu, Some(_)) => bail!(InvalidInput, "relu takes one operand"),
        (Elementwise::Add, Some(b)) => add(a, b),
        (Elementwise::Add, None) => bail!(InvalidInput, "add takes two operands"),
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = Tensor::default();
    relu_into(input, &mut out);
    out
}

pub(crate) fn relu_into(input: &Tensor, out: &mut Tensor) {
    out.reset(input.dims());
    out.data_mut()
        .par_chunks_mut(4096)
        .zip(input.data().par_chunks(4096))
        .for_each(|(y, x)| {
            for (o, &v) in y.iter_mut().zip(x) {
                *o = v.max(0.0);
            }
        });
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::default();
    add_into(a, b, &mut out)?;
    Ok(out)
}

pub(crate) fn add_into(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        bail!(ShapeMismatch, "add of {} and {}", a.dims(), b.dims());
    }
    out.reset(a.dims());
    out.data_mut()
        .par_chunks_mut(4096)
        .zip(a.data().par_chunks(4096).zip(b.data().par_chunks(4096)))
        .for_each(|(y, (x0, x1))| {
            for ((o, &u), &v) in y.iter_mut().zip(x0).zip(x1) {
                *o = u + v;
            }
        });
    Ok(())
}

/// Output dims of a max pool, validating that padding stays within half a
/// window so every window holds at least one real element.
pub(crate) fn pool_dims(input: Dims, k: usize, s: usize, p: usize) -> Result<Dims> {
    if k == 0 || s == 0 {
        bail!(InvalidInput, "pool kernel and stride must be positive");
    }
    if 2 * p > k {
        bail!(
            InvalidInput,
            "pool padding {} exceeds half of kernel {}",
            p,
            k
        );
    }
    let params = ConvParams::square(k, s, p);
    let (oh, ow) = params.output_hw(input.h, input.w)?;
    Ok(Dims::new(input.n, input.c, oh, ow))
}

pub fn maxpool2d(input: &Tensor, k: usize, s: usize, p: usize) -> Result<Tensor> {
    let mut out = Tensor::default();
    maxpool_into(input, k, s, p, &mut out)?;
    Ok(out)
}

pub(crate) fn maxpool_into(
    input: &Tensor,
    k: usize,
    s: usize,
    p: usize,
    out: &mut Tensor,
) -> Result<()> {
    let in_dims = input.dims();
    let out_dims = pool_dims(in_dims, k, s, p)?;
    out.reset(out_dims);
    // clipped window bounds per output coordinate
    let window = |o: usize, len: usize| {
        let start = (o * s) as isize - p as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + k as isize) as usize).min(len);
        (lo, hi)
    };
    let rows: Vec<_> = (0..out_dims.h).map(|o| window(o, in_dims.h)).collect();
    let cols: Vec<_> = (0..out_dims.w).map(|o| window(o, in_dims.w)).collect();
    out.data_mut()
        .par_chunks_mut(out_dims.plane())
        .zip(input.data().par_chunks(in_dims.plane()))
        .for_each(|(y, x)| {
            for (oy, &(y0, y1)) in rows.iter().enumerate() {
                for (ox, &(x0, x1)) in cols.iter().enumerate() {
                    let mut m = f32::NEG_INFINITY;
                    for iy in y0..y1 {
                        for &v in &x[iy * in_dims.w + x0..iy * in_dims.w + x1] {
                            m = m.max(v);
                        }
                    }
                    y[oy * out_dims.w + ox] = m;
                }
            }
        });
    Ok(())
}

pub fn upsample(input: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    let mut out = Tensor::default();
    upsample_into(input, factor, mode, &mut out)?;
    Ok(out)
}

/// Source taps `(i0, i1, weight of i1)` for each output coordinate.
fn interp_table(len: usize, factor: usize, mode: UpsampleMode) -> Vec<(usize, usize, f32)> {
    (0..len * factor)
        .map(|d| match mode {
            UpsampleMode::Nearest => (d / factor, d / factor, 0.0),
            UpsampleMode::Bilinear => {
                let src = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (src - i0 as f64) as f32)
            }
        })
        .collect()
}

pub(crate) fn upsample_into(
    input: &Tensor,
    factor: usize,
    mode: UpsampleMode,
    out: &mut Tensor,
) -> Result<()> {
    if factor == 0 {
        bail!(InvalidInput, "upsample factor must be at least 1");
    }
    let d = input.dims();
    let od = Dims::new(d.n, d.c, d.h * factor, d.w * factor);
    out.reset(od);
    if od.is_empty() {
        return Ok(());
    }
    let rows = interp_table(d.h, factor, mode);
    let cols = interp_table(d.w, factor, mode);
    out.data_mut()
        .par_chunks_mut(od.plane())
        .zip(input.data().par_chunks(d.plane()))
        .for_each(|(y, x)| {
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                let r0 = &x[y0 * d.w..(y0 + 1) * d.w];
                let r1 = &x[y1 * d.w..(y1 + 1) * d.w];
                let dst = &mut y[oy * od.w..(oy + 1) * od.w];
                for (o, &(x0, x1, lx)) in dst.iter_mut().zip(&cols) {
                    let top = r0[x0] + lx * (r0[x1] - r0[x0]);
                    let bottom = r1[x0] + lx * (r1[x1] - r1[x0]);
                    *o = top + ly * (bottom - top);
                }
            }
        });
    Ok(())
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let mut out = Tensor::default();
    concat_into(inputs, &mut out)?;
    Ok(out)
}

pub(crate) fn concat_dims(inputs: &[Dims]) -> Result<Dims> {
    let Some(first) = inputs.first() else {
        bail!(InvalidInput, "concat of an empty list");
    };
    let mut c = 0;
    for d in inputs {
        if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
            bail!(ShapeMismatch, "concat of {} and {}", first, d);
        }
        c += d.c;
    }
    Ok(first.with_channels(c))
}

pub(crate) fn concat_into(inputs: &[&Tensor], out: &mut Tensor) -> Result<()> {
    let dims: Vec<Dims> = inputs.iter().map(|t| t.dims()).collect();
    let od = concat_dims(&dims)?;
    out.reset(od);
    let out_image = od.c * od.plane();
    let data = out.data_mut();
    for n in 0..od.n {
        let mut offset = n * out_image;
        for t in inputs {
            let image = t.dims().c * t.dims().plane();
            data[offset..offset + image].copy_from_slice(&t.data()[n * image..(n + 1) * image]);
            offset += image;
        }
    }
    Ok(())
}

/// Index of the largest channel per pixel; ties go to the lowest index.
pub fn argmax_channels(input: &Tensor) -> Result<ClassMap> {
    let d = input.dims();
    if d.is_empty() {
        bail!(InvalidInput, "argmax of an empty tensor {}", d);
    }
    if d.c > ClassMap::IGNORE as usize {
        bail!(
            InvalidInput,
            "{} channels exceed the label range of a class map",
            d.c
        );
    }
    let p = d.plane();
    let mut data = vec![0u8; d.n * p];
    for n in 0..d.n {
        let labels = &mut data[n * p..(n + 1) * p];
        let mut best = input.plane(n, 0).to_vec();
        for c in 1..d.c {
            for ((b, l), &v) in best
                .iter_mut()
                .zip(labels.iter_mut())
                .zip(input.plane(n, c))
            {
                if v > *b {
                    *b = v;
                    *l = c as u8;
                }
            }
        }
    }
    Ok(ClassMap {
        n: d.n,
        h: d.h,
        w: d.w,
        data,
    })
}
