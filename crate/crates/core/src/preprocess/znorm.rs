use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

/// In-mask intensity statistics used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: f64,
    pub std: f64,
}

impl ZStats {
    /// Pools in-mask pixels over all `samples`.
    pub fn pooled<'a>(samples: impl IntoIterator<Item = (&'a Tensor, &'a Mask)>) -> Result<Self> {
        let (mut n, mut sum) = (0usize, 0.0f64);
        let mut vals = Vec::new();
        for (img, mask) in samples {
            let (h, w) = mask.dims();
            if img.shape() != [h, w] {
                return Err(dim_err!("znorm: image {:?} vs mask {h}x{w}", img.shape()));
            }
            for i in mask.indices() {
                let v = img[i] as f64;
                sum += v;
                n += 1;
                vals.push(v);
            }
        }
        if n == 0 {
            return Err(Error::Data("znorm: no in-mask pixels".into()));
        }
        let mean = sum / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 1e-12) {
            return Err(Error::Data(format!(
                "znorm: in-mask intensities have zero variance (mean {mean})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        image.map(|x| ((x as f64 - self.mean) / self.std) as f32)
    }
}

/// Z-scores every pixel with statistics taken inside `mask` of the same image.
pub fn znorm(image: &Tensor, mask: &Mask) -> Result<Tensor> {
    Ok(ZStats::pooled([(image, mask)])?.apply(image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;

    fn in_mask_moments(t: &Tensor, m: &Mask) -> (f64, f64) {
        let v: Vec<f64> = m.indices().map(|i| t[i] as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn unit_moments_inside_mask() {
        let mut rng = seeded_rng(5);
        let img = Tensor::rand_normal([20, 20], 7.0, &mut rng).map(|v| v + 30.0);
        let mask = Mask::from_fn(20, 20, |r, c| r > 3 && c > 5);
        let out = znorm(&img, &mask).unwrap();
        let (m, s) = in_mask_moments(&out, &mask);
        assert!(m.abs() < 1e-5);
        assert!((s - 1.0).abs() < 1e-4);
    }

    #[test]
    fn affine_invariant() {
        let mut rng = seeded_rng(6);
        let img = Tensor::rand_normal([16, 16], 1.0, &mut rng);
        let mask = Mask::from_fn(16, 16, |r, _| r % 3 != 0);
        let scaled = img.map(|v| 3.5 * v - 12.0);
        let a = znorm(&img, &mask).unwrap();
        let b = znorm(&scaled, &mask).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_image_is_a_data_error() {
        let img = Tensor::full([4, 4], 2.0f32);
        let mask = Mask::from_fn(4, 4, |_, _| true);
        assert!(matches!(znorm(&img, &mask), Err(Error::Data(_))));
    }
}
