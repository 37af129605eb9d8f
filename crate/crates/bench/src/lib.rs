//! Fixtures shared by the benchmarks.

use corrsig::featext::{P_DIM, R_DIM};
use corrsig::numcore::seeded_rng;
use corrsig::predictor::Sample;
use corrsig::preprocess::Mask;
use corrsig::{Tensor, Variant};

/// Filter widths of the reduced training profile.
pub const REDUCED_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];

/// Standard-normal tensor of the given shape.
pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_normal(shape.to_vec(), 1.0, &mut seeded_rng(seed))
}

/// Paired CorrNet views `[n, 128]`, `[n, 64]` sharing a linear signal.
pub fn views(n: usize, seed: u64) -> (Tensor, Tensor) {
    let r = normal(&[n, R_DIM], seed);
    let noise = normal(&[n, P_DIM], seed + 1);
    let p: Vec<f32> = (0..n)
        .flat_map(|i| (0..P_DIM).map(move |j| (i, j)))
        .map(|(i, j)| r.at(&[i, j]) + 0.5 * noise.at(&[i, j]))
        .collect();
    (r, Tensor::new([n, P_DIM], p).expect("shape matches"))
}

/// Random predictor samples with a square lesion in the top-left corner.
pub fn predictor_samples(variant: Variant, k: usize, hw: usize, n: usize) -> Vec<Sample> {
    let mut rng = seeded_rng(n as u64);
    (0..n)
        .map(|_| Sample {
            inputs: variant
                .stream_channels(k)
                .into_iter()
                .map(|c| Tensor::rand_normal([c, hw, hw], 1.0, &mut rng))
                .collect(),
            label: Mask::from_fn(hw, hw, |r, c| r < hw / 4 && c < hw / 4),
        })
        .collect()
}
