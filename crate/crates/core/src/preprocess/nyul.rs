use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

/// Interior landmark percentiles.
pub const DECILES: [f64; 9] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

/// Learned Nyúl standard scale.
///
/// Landmark vectors are `[p_low, p10, ..., p90, p_high]`, where `p_low` and
/// `p_high` are the clip percentiles (the minimum and maximum after clipping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NyulModel {
    pub percentile_landmarks: Vec<f64>,
    pub standard_scale: Vec<f64>,
    pub clip_percentiles: (f64, f64),
}

/// Order-statistic percentile (`q` in `[0, 100]`) of ascending `sorted`.
pub fn percentile_rank(sorted: &[f32], q: f64) -> f32 {
    let idx = ((q / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn in_mask_sorted(image: &Tensor, mask: &Mask, what: &str) -> Result<Vec<f32>> {
    let (h, w) = mask.dims();
    if image.shape() != [h, w] {
        return Err(dim_err!(
            "{what}: image {:?} vs mask {h}x{w}",
            image.shape()
        ));
    }
    let mut v: Vec<f32> = mask.indices().map(|i| image[i]).collect();
    if v.is_empty() {
        return Err(Error::Data(format!("{what}: prostate mask is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{what}: non-finite intensity in mask")));
    }
    v.sort_by(f32::total_cmp);
    Ok(v)
}

impl NyulModel {
    fn all_percentiles(&self) -> Vec<f64> {
        let mut p = vec![self.clip_percentiles.0];
        p.extend_from_slice(&self.percentile_landmarks);
        p.push(self.clip_percentiles.1);
        p
    }

    /// In-mask landmark intensities of one image.
    pub fn landmarks(&self, image: &Tensor, mask: &Mask, what: &str) -> Result<Vec<f64>> {
        let sorted = in_mask_sorted(image, mask, what)?;
        Ok(self
            .all_percentiles()
            .iter()
            .map(|&q| percentile_rank(&sorted, q) as f64)
            .collect())
    }
}

fn check_increasing(v: &[f64], what: &str) -> Result<()> {
    if v.windows(2).all(|p| p[1] > p[0]) {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{what}: degenerate landmarks {v:?} (not strictly increasing)"
        )))
    }
}

/// Learns the standard scale from named training images and their prostate
/// masks. Each image's landmarks are mapped affinely so the clip percentiles
/// land on 0 and 1; the scale is the mean mapped landmark vector.
pub fn nyul_learn(samples: &[(&str, &Tensor, &Mask)]) -> Result<NyulModel> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "Nyúl standardisation needs at least 2 training images, got {}",
            samples.len()
        )));
    }
    let template = NyulModel {
        percentile_landmarks: DECILES.to_vec(),
        standard_scale: Vec::new(),
        clip_percentiles: (1.0, 99.0),
    };
    let mut acc = vec![0.0; DECILES.len() + 2];
    for (name, image, mask) in samples {
        let lm = template.landmarks(image, mask, name)?;
        check_increasing(&lm, name)?;
        let (lo, hi) = (lm[0], lm[lm.len() - 1]);
        for (a, v) in acc.iter_mut().zip(&lm) {
            *a += (v - lo) / (hi - lo);
        }
    }
    let n = samples.len() as f64;
    Ok(NyulModel {
        standard_scale: acc.into_iter().map(|a| a / n).collect(),
        ..template
    })
}

/// Piecewise-linear map through `(from[i], to[i])` with linear extrapolation
/// on the end segments.
fn piecewise(x: f64, from: &[f64], to: &[f64]) -> f64 {
    let last = from.len() - 1;
    let seg = match from.iter().position(|&f| x < f) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => last - 1,
    };
    let (x0, x1, y0, y1) = (from[seg], from[seg + 1], to[seg], to[seg + 1]);
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}

/// Maps an image onto the standard scale using landmarks measured inside
/// `mask`; every pixel, in or out of the mask, goes through the same map.
pub fn nyul_apply(image: &Tensor, mask: &Mask, model: &NyulModel) -> Result<Tensor> {
    check_increasing(&model.standard_scale, "Nyúl standard scale")?;
    let lm = model.landmarks(image, mask, "nyul_apply")?;
    check_increasing(&lm, "nyul_apply")?;
    let s = &model.standard_scale;
    Ok(image.map(|x| piecewise(x as f64, &lm, s) as f32))
}
