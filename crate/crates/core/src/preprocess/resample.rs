use super::{Mask, SliceRecord};
use crate::error::{dim_err, Result};
use crate::numcore::kernels::bilinear_forward;
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Zero-pads `planes` of `h x w` symmetrically to a square.
fn pad_square<T: Copy + Default>(data: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, usize) {
    let s = h.max(w);
    if s == h && s == w {
        return (data.to_vec(), s);
    }
    let (top, left) = ((s - h) / 2, (s - w) / 2);
    let mut out = vec![T::default(); planes * s * s];
    for p in 0..planes {
        for r in 0..h {
            let src = &data[(p * h + r) * w..(p * h + r + 1) * w];
            let off = (p * s + top + r) * s + left;
            out[off..off + w].copy_from_slice(src);
        }
    }
    (out, s)
}

fn nearest<T: Copy>(data: &[T], planes: usize, s: usize, (th, tw): (usize, usize)) -> Vec<T> {
    let src_index = |o: usize, t: usize| (((o as f64 + 0.5) * s as f64 / t as f64) as usize).min(s - 1);
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        for r in 0..th {
            let sr = src_index(r, th);
            for c in 0..tw {
                out.push(data[(p * s + sr) * s + src_index(c, tw)]);
            }
        }
    }
    out
}

/// Pads to square, then rescales to `target`. Works on `[H, W]` and
/// `[C, H, W]` tensors.
pub fn resample(image: &Tensor, target: (usize, usize), interp: Interp) -> Result<Tensor> {
    if target.0 == 0 || target.1 == 0 {
        return Err(dim_err!("resample target {target:?} must be positive"));
    }
    let shape = image.shape();
    let (planes, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(dim_err!("resample expects [H,W] or [C,H,W], got {shape:?}")),
    };
    let (sq, s) = pad_square(image.data(), planes, h, w);
    let data = if (s, s) == target {
        sq
    } else {
        match interp {
            Interp::Bilinear => bilinear_forward(planes, (s, s), target, &sq),
            Interp::Nearest => nearest(&sq, planes, s, target),
        }
    };
    let out_shape = if shape.len() == 2 {
        vec![target.0, target.1]
    } else {
        vec![planes, target.0, target.1]
    };
    Tensor::new(out_shape, data)
}

pub fn resample_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    if target.0 == 0 || target.1 == 0 {
        return Err(dim_err!("resample target {target:?} must be positive"));
    }
    let (h, w) = mask.dims();
    let (sq, s) = pad_square(mask.data(), 1, h, w);
    let data = if (s, s) == target {
        sq
    } else {
        nearest(&sq, 1, s, target)
    };
    Mask::new(target.0, target.1, data)
}

/// Brings every channel of a slice onto the `grid x grid` lattice.
pub fn resample_record(rec: &SliceRecord, grid: usize) -> Result<SliceRecord> {
    rec.validate()?;
    let (h, w) = rec.dims();
    let target = (grid, grid);
    let s = h.max(w) as f64;
    let factor = s / grid as f64;
    Ok(SliceRecord {
        t2w: resample(&rec.t2w, target, Interp::Bilinear)?,
        adc: resample(&rec.adc, target, Interp::Bilinear)?,
        hist: rec
            .hist
            .as_ref()
            .map(|t| resample(t, target, Interp::Bilinear))
            .transpose()?,
        prostate_mask: resample_mask(&rec.prostate_mask, target)?,
        cancer_label: resample_mask(&rec.cancer_label, target)?,
        spacing_mm: (rec.spacing_mm.0 * factor, rec.spacing_mm.1 * factor),
        ..rec.clone()
    })
}
