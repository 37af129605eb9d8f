//! Forward and backward kernels on raw NCHW buffers.
//!
//! The autodiff tape in [`super::graph`] owns shapes and bookkeeping; these
//! functions only move numbers. Reductions accumulate in `f64`.

use super::Element;
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(dim_err!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(dim_err!(
                "conv2d: input has {c} channels but weight expects {wc}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel must be odd-sized, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "conv2d: extent {size} with kernel {k}, padding {padding}, stride {stride} \
                     does not give an integral output size"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            ho: out(h, kh)?,
            wo: out(w, kw)?,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Element>(g: &ConvGeometry, img: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kj - pad; copy the in-bounds run, zero the rest
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, g.wo as isize) as usize;
                        let hi = (g.w as isize - shift).clamp(lo as isize, g.wo as isize) as usize;
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = (lo as isize + shift) as usize;
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kj as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, col: &[T], img: &mut [T]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, g.wo as isize) as usize;
                        let hi = (g.w as isize - shift).clamp(lo as isize, g.wo as isize) as usize;
                        let start = (lo as isize + shift) as usize;
                        for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += s;
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, plus per-filter bias.
pub fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.patch();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.f * p;
    let mut out = vec![T::zero(); g.n * out_sz];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for b in 0..g.n {
        let img = &input[b * in_sz..(b + 1) * in_sz];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (f, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.f, k, p, T::one(), weight, k as isize, 1, cols, p as isize, 1, beta, dst,
            p as isize, 1,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let k = g.patch();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.f * p;

    let bias = want_bias.then(|| {
        let mut acc = vec![0f64; g.f];
        for b in 0..g.n {
            for (f, chunk) in grad_out[b * out_sz..(b + 1) * out_sz].chunks(p).enumerate() {
                acc[f] += chunk.iter().map(|x| x.as_f64()).sum::<f64>();
            }
        }
        acc.into_iter().map(T::from_f64).collect()
    });

    let mut dw = want_weight.then(|| vec![T::zero(); g.f * k]);
    let mut dx = want_input.then(|| vec![T::zero(); g.n * in_sz]);
    if dw.is_none() && dx.is_none() {
        return ConvGrads {
            input: None,
            weight: None,
            bias,
        };
    }
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcol = vec![T::zero(); if dx.is_some() && !g.is_pointwise() { k * p } else { 0 }];
    for b in 0..g.n {
        let gout = &grad_out[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let img = &input[b * in_sz..(b + 1) * in_sz];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            // dW (F x K) += gout (F x P) * cols^T (P x K)
            T::gemm(
                g.f, p, k, T::one(), gout, p as isize, 1, cols, 1, p as isize, T::one(), dw,
                k as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * in_sz..(b + 1) * in_sz];
            // dcol (K x P) = W^T (K x F) * gout (F x P)
            if g.is_pointwise() {
                T::gemm(
                    k, g.f, p, T::one(), weight, 1, k as isize, gout, p as isize, 1, T::one(),
                    dimg, p as isize, 1,
                );
            } else {
                T::gemm(
                    k, g.f, p, T::one(), weight, 1, k as isize, gout, p as isize, 1, T::zero(),
                    &mut dcol, p as isize, 1,
                );
                col2im_add(g, &dcol, dimg);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias,
    }
}

pub fn maxpool_dims(shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return Err(dim_err!("maxpool2d expects NCHW input, got {shape:?}"));
    }
    if k == 0 || stride == 0 {
        return Err(Error::Config("maxpool2d window and stride must be positive".into()));
    }
    let out = |size: usize| -> Result<usize> {
        if size < k || !(size - k).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "maxpool2d: extent {size} not divisible for window {k} stride {stride}"
            )));
        }
        Ok((size - k) / stride + 1)
    };
    Ok((out(shape[2])?, out(shape[3])?))
}

/// Returns pooled values and, per output cell, the flat input index of the
/// first maximum in scan order.
pub fn maxpool_forward<T: Element>(
    shape: &[usize],
    input: &[T],
    k: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<u32>)> {
    let (ho, wo) = maxpool_dims(shape, k, stride)?;
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for dx in 0..k {
                        let v = input[row + dx];
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    Ok((out, arg))
}

/// Per-channel statistics of an NCHW buffer: (mean, biased variance).
pub fn channel_stats<T: Element>(shape: &[usize], x: &[T]) -> Vec<(f64, f64)> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    (0..c)
        .map(|ch| {
            let mut sum = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                sum += x[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = (n * hw) as f64;
            let mean = sum / m;
            let mut var = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for v in &x[off..off + hw] {
                    let d = v.as_f64() - mean;
                    var += d * d;
                }
            }
            (mean, var / m)
        })
        .collect()
}

/// Bilinear interpolation table along one axis with half-pixel centres.
#[derive(Debug, Clone)]
pub struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LerpAxis {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { s - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of `planes` independent `h x w` planes.
pub fn bilinear_forward<T: Element>(
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    input: &[T],
) -> Vec<T> {
    let ay = LerpAxis::new(h, ho);
    let ax = LerpAxis::new(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0].as_f64() + fx * src[y0 * w + x1].as_f64())
                    + fy * ((1.0 - fx) * src[y1 * w + x0].as_f64() + fx * src[y1 * w + x1].as_f64());
                dst[oy * wo + ox] = T::from_f64(v);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Element>(
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    grad_out: &[T],
) -> Vec<T> {
    let ay = LerpAxis::new(h, ho);
    let ax = LerpAxis::new(w, wo);
    let mut acc = vec![0f64; planes * h * w];
    for pl in 0..planes {
        let g = &grad_out[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut acc[pl * h * w..(pl + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let gv = g[oy * wo + ox].as_f64();
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
