//! Direct implementations of each kernel, written straight from the
//! definitions with `f64` accumulation. Slow; used as test oracles and by
//! `--reference` execution.

use super::ops::{check_conv, concat_dims, pool_dims};
use super::{ConvParams, Dims, Filter, Tensor, UpsampleMode};
use crate::error::{bail, Result};

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<Tensor> {
    let filter = Filter::from_tensor(weight);
    let od = check_conv(input.dims(), &filter, bias, params)?;
    let id = input.dims();
    let (kh, kw) = params.kernel;
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    let mut out = Tensor::zeros(od);
    for n in 0..od.n {
        for co in 0..od.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut acc = bias.map_or(0.0, |b| b[co] as f64);
                    for ci in 0..id.c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= id.h as isize || ix >= id.w as isize {
                                    continue;
                                }
                                let v = input.at(n, ci, iy as usize, ix as usize) as f64;
                                acc += v * weight.at(co, ci, ky, kx) as f64;
                            }
                        }
                    }
                    let i = out.index(n, co, oy, ox);
                    out.data_mut()[i] = acc as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool2d(input: &Tensor, k: usize, s: usize, p: usize) -> Result<Tensor> {
    let id = input.dims();
    let od = pool_dims(id, k, s, p)?;
    Ok(Tensor::from_fn(od, |n, c, oy, ox| {
        let mut m = f32::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                let ix = (ox * s + kx) as isize - p as isize;
                let v = if iy < 0 || ix < 0 || iy >= id.h as isize || ix >= id.w as isize {
                    f32::NEG_INFINITY
                } else {
                    input.at(n, c, iy as usize, ix as usize)
                };
                m = m.max(v);
            }
        }
        m
    }))
}

pub fn upsample(input: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    if factor == 0 {
        bail!(InvalidInput, "upsample factor must be at least 1");
    }
    let id = input.dims();
    let od = Dims::new(id.n, id.c, id.h * factor, id.w * factor);
    Ok(Tensor::from_fn(od, |n, c, y, x| match mode {
        UpsampleMode::Nearest => input.at(n, c, y / factor, x / factor),
        UpsampleMode::Bilinear => {
            let src = |d: usize, len: usize| {
                ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64)
            };
            let (sy, sx) = (src(y, id.h), src(x, id.w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(id.h - 1), (x0 + 1).min(id.w - 1));
            let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
            let v = |yy: usize, xx: usize| input.at(n, c, yy, xx) as f64;
            let top = v(y0, x0) * (1.0 - lx) + v(y0, x1) * lx;
            let bottom = v(y1, x0) * (1.0 - lx) + v(y1, x1) * lx;
            (top * (1.0 - ly) + bottom * ly) as f32
        }
    }))
}

pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let c = input.dims().c;
    if [gamma.len(), beta.len(), mean.len(), var.len()] != [c; 4] {
        bail!(
            ShapeMismatch,
            "batch norm vectors do not match {} channels",
            c
        );
    }
    if let Some(v) = var.iter().find(|v| **v < 0.0) {
        bail!(InvalidInput, "negative variance {}", v);
    }
    Ok(Tensor::from_fn(input.dims(), |n, ch, y, x| {
        let v = input.at(n, ch, y, x) as f64;
        let norm = (v - mean[ch] as f64) / (var[ch] as f64 + eps as f64).sqrt();
        (gamma[ch] as f64 * norm + beta[ch] as f64) as f32
    }))
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let dims: Vec<Dims> = inputs.iter().map(|t| t.dims()).collect();
    let od = concat_dims(&dims)?;
    Ok(Tensor::from_fn(od, |n, c, y, x| {
        let mut c = c;
        for t in inputs {
            if c < t.dims().c {
                return t.at(n, c, y, x);
            }
            c -= t.dims().c;
        }
        unreachable!("channel index within concatenated total")
    }))
}
