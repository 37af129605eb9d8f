use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

/// Normalised 1-D Gaussian taps for radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn smooth_plane(src: &[f32], h: usize, w: usize, taps: &[f64]) -> Vec<f32> {
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * row[reflect(x as i64 + k as i64 - r, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as i64 + k as i64 - r, h) * w + x])
                .sum();
            out[y * w + x] = v as f32;
        }
    }
    out
}

/// Separable Gaussian blur of each `[H, W]` plane of a 2-d or 3-d tensor.
pub fn gaussian_smooth(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let taps = gaussian_kernel(sigma)?;
    let s = image.shape();
    let (planes, h, w) = match *s {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(dim_err!("gaussian_smooth expects [H,W] or [C,H,W], got {s:?}")),
    };
    let mut data = Vec::with_capacity(image.len());
    for p in image.data().chunks(h * w).take(planes) {
        data.extend(smooth_plane(p, h, w, &taps));
    }
    Tensor::new(s.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_preserved() {
        let img = Tensor::full([7, 5], 3.25f32);
        let out = gaussian_smooth(&img, 1.3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn impulse_response_is_the_sampled_kernel() {
        let sigma = 0.25;
        let (h, w) = (9, 9);
        let mut img = Tensor::zeros([h, w]);
        img[4 * w + 4] = 1.0;
        let out = gaussian_smooth(&img, sigma).unwrap();
        // direct sampling of the 2-d Gaussian on the radius-1 stencil
        let raw = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-1..=1)
            .flat_map(|a| (-1..=1).map(move |b| raw(a) * raw(b)))
            .sum();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (dy, dx) = (y - 4, x - 4);
                let expected = if dy.abs() <= 1 && dx.abs() <= 1 {
                    raw(dy) * raw(dx) / norm
                } else {
                    0.0
                };
                let got = out.at(&[y as usize, x as usize]) as f64;
                assert!((got - expected).abs() < 1e-7, "({y},{x}) {got} vs {expected}");
            }
        }
    }

    #[test]
    fn default_histopathology_sigma_has_unit_radius() {
        assert_eq!(gaussian_kernel(crate::preprocess::HIST_SIGMA).unwrap().len(), 3);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let img = Tensor::zeros([3, 3]);
        assert!(matches!(gaussian_smooth(&img, 0.0), Err(Error::Config(_))));
        assert!(matches!(gaussian_smooth(&img, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn reflection_indexing() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(9, 4), 1);
    }
}
